//! The dataset manifest: one text file naming, per clip, the reference
//! image, the degradation fingerprint, and the (LR, HR) frame pairs in
//! order. Relative paths are resolved against the manifest's directory on
//! load, and every referenced file must exist.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stran_core::image::DegradeConfig;
use stran_core::io::fnv1a64;
use stran_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEntry {
    pub id: String,
    pub reference: PathBuf,
    pub degrade_hash: String,
    /// (low-res frame, high-res ground truth) in display order.
    pub frames: Vec<(PathBuf, PathBuf)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub clips: Vec<ClipEntry>,
}

/// Fingerprint of the degradation settings, stored per clip so a manifest
/// records how its LR frames were produced.
pub fn degrade_hash(cfg: &DegradeConfig) -> String {
    let canon = format!("factor={},block={},q={},seed={}", cfg.factor, cfg.block, cfg.q, cfg.seed);
    format!("{:016x}", fnv1a64(canon.as_bytes()))
}

fn path_str(p: &Path) -> Result<&str> {
    p.to_str().ok_or_else(|| Error::Manifest { msg: format!("non-UTF-8 path {}", p.display()) })
}

impl Manifest {
    pub fn clip(&self, id: &str) -> Result<&ClipEntry> {
        self.clips
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Manifest { msg: format!("unknown clip id '{id}'") })
    }

    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        for clip in &self.clips {
            writeln!(out, "clip {}", clip.id).unwrap();
            writeln!(out, "ref {}", path_str(&clip.reference)?).unwrap();
            writeln!(out, "degrade {}", clip.degrade_hash).unwrap();
            for (lr, hr) in &clip.frames {
                writeln!(out, "frame {} {}", path_str(lr)?, path_str(hr)?).unwrap();
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()?).map_err(|e| Error::io(path, e))
    }

    /// Parse and validate: ids unique and non-empty, hashes well-formed,
    /// every clip carries a reference and at least one frame, and all
    /// referenced files exist once resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let resolve = |s: &str| -> PathBuf {
            let p = Path::new(s);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut clips: Vec<ClipEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Manifest { msg: format!("line {}: {msg}", i + 1) };
            let (word, rest) =
                line.split_once(' ').ok_or_else(|| bad(format!("unrecognized line '{line}'")))?;
            match word {
                "clip" => {
                    let id = rest.trim();
                    if id.is_empty() {
                        return Err(bad("empty clip id".into()));
                    }
                    if clips.iter().any(|c| c.id == id) {
                        return Err(bad(format!("duplicate clip id '{id}'")));
                    }
                    clips.push(ClipEntry {
                        id: id.to_string(),
                        reference: PathBuf::new(),
                        degrade_hash: String::new(),
                        frames: Vec::new(),
                    });
                }
                "ref" | "degrade" | "frame" => {
                    let clip = clips
                        .last_mut()
                        .ok_or_else(|| bad(format!("'{word}' before any 'clip' line")))?;
                    match word {
                        "ref" => clip.reference = resolve(rest.trim()),
                        "degrade" => {
                            let h = rest.trim();
                            if h.len() != 16 || !h.chars().all(|c| c.is_ascii_hexdigit()) {
                                return Err(bad(format!("malformed degrade hash '{h}'")));
                            }
                            clip.degrade_hash = h.to_string();
                        }
                        _ => {
                            let (lr, hr) = rest
                                .trim()
                                .split_once(' ')
                                .ok_or_else(|| bad("frame line needs LR and HR paths".into()))?;
                            clip.frames.push((resolve(lr.trim()), resolve(hr.trim())));
                        }
                    }
                }
                _ => return Err(bad(format!("unrecognized line '{line}'"))),
            }
        }
        let manifest = Manifest { clips };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::Manifest { msg: "no clips".into() });
        }
        for clip in &self.clips {
            let missing = |what: &str, p: &Path| Error::Manifest {
                msg: format!("clip '{}': missing {what} {}", clip.id, p.display()),
            };
            if clip.reference.as_os_str().is_empty() {
                return Err(Error::Manifest { msg: format!("clip '{}': no ref line", clip.id) });
            }
            if clip.degrade_hash.is_empty() {
                return Err(Error::Manifest { msg: format!("clip '{}': no degrade line", clip.id) });
            }
            if clip.frames.is_empty() {
                return Err(Error::Manifest { msg: format!("clip '{}': no frames", clip.id) });
            }
            if !clip.reference.is_file() {
                return Err(missing("reference", &clip.reference));
            }
            for (lr, hr) in &clip.frames {
                if !lr.is_file() {
                    return Err(missing("LR frame", lr));
                }
                if !hr.is_file() {
                    return Err(missing("HR frame", hr));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}
