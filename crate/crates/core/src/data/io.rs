//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/images/NNNN.ppm   binary P6, maxval 255, byte = round(value · 255)
//! <dir>/labels/NNNN.pgm   binary P5, maxval 255, byte = class id (255 = ignored)
//! ```
//!
//! The manifest starts with one `# otseg-dataset key=value ...` header line
//! recording the scene spec and shift, followed by one
//! `index,image_path,label_path` line per scene where `label_path` is
//! `none` for unlabeled sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::scene::{generate_scene, quantize, Image, SceneSpec};
use super::shift::{apply_domain_shift, DomainShift};
use crate::error::{Error, Result};
use crate::jdot::LabelGrid;

pub const MANIFEST: &str = "manifest.txt";
const HEADER_TAG: &str = "# otseg-dataset";
/// PGM value marking an unlabeled pixel.
pub const IGNORE_LABEL: u8 = 255;

/// A domain shift together with the seed of its noise stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    pub shift: DomainShift,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: u64,
    pub image_path: String,
    pub label_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub shift: Option<ShiftSpec>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn is_labeled(&self) -> bool {
        self.entries.first().is_some_and(|e| e.label_path.is_some())
    }

    pub fn render(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "{HEADER_TAG} side={} num_classes={} shapes_min={} shapes_max={} seed={} count={}",
            s.side,
            s.num_classes,
            s.shapes_min,
            s.shapes_max,
            s.seed,
            self.entries.len()
        );
        match &self.shift {
            None => out.push_str(" shift=none"),
            Some(ShiftSpec { shift, seed }) => {
                let join = |v: &[f64; 3]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
                let _ = write!(
                    out,
                    " shift=on gain={} bias={} noise_sigma={} texture_freq={} shift_seed={}",
                    join(&shift.channel_gain),
                    join(&shift.channel_bias),
                    shift.noise_sigma,
                    shift.texture_freq,
                    seed
                );
            }
        }
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{}",
                e.index,
                e.image_path,
                e.label_path.as_deref().unwrap_or("none")
            );
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("manifest is empty")?;
        let fields = header
            .strip_prefix(HEADER_TAG)
            .ok_or_else(|| format!("manifest header must start with {HEADER_TAG:?}"))?;
        let kv: BTreeMap<&str, &str> = fields
            .split_whitespace()
            .map(|tok| tok.split_once('=').ok_or_else(|| format!("malformed header field {tok:?}")))
            .collect::<std::result::Result<_, _>>()?;
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| format!("manifest header lacks {k}"));
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| format!("header field {k} is not an integer"));
        let float = |k: &str| get(k)?.parse::<f64>().map_err(|_| format!("header field {k} is not a number"));
        let triple = |k: &str| -> std::result::Result<[f64; 3], String> {
            let v: Vec<f64> = get(k)?
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|_| format!("header field {k} is not a number list")))
                .collect::<std::result::Result<_, _>>()?;
            v.try_into().map_err(|_| format!("header field {k} needs 3 values"))
        };
        let spec = SceneSpec {
            side: num("side")? as usize,
            num_classes: num("num_classes")? as usize,
            shapes_min: num("shapes_min")? as usize,
            shapes_max: num("shapes_max")? as usize,
            seed: num("seed")?,
        };
        spec.validate().map_err(|e| e.to_string())?;
        let shift = match get("shift")? {
            "none" => None,
            "on" => Some(ShiftSpec {
                shift: DomainShift {
                    channel_gain: triple("gain")?,
                    channel_bias: triple("bias")?,
                    noise_sigma: float("noise_sigma")?,
                    texture_freq: float("texture_freq")?,
                },
                seed: num("shift_seed")?,
            }),
            other => return Err(format!("unknown shift value {other:?}")),
        };
        let count = num("count")? as usize;

        let mut entries = Vec::with_capacity(count);
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let lineno = n + 2;
            let parts: Vec<&str> = line.trim().split(',').collect();
            let [index, image, label] = parts[..] else {
                return Err(format!("line {lineno}: expected index,image_path,label_path"));
            };
            let index = index
                .parse::<u64>()
                .map_err(|_| format!("line {lineno}: bad index {index:?}"))?;
            let label_path = (label != "none").then(|| label.to_string());
            entries.push(ManifestEntry {
                index,
                image_path: image.to_string(),
                label_path,
            });
        }
        if entries.len() != count {
            return Err(format!("header says {count} entries, found {}", entries.len()));
        }
        if entries.is_empty() {
            return Err("manifest lists no scenes".into());
        }
        let labeled = entries[0].label_path.is_some();
        if entries.iter().any(|e| e.label_path.is_some() != labeled) {
            return Err("manifest mixes labeled and unlabeled entries".into());
        }
        Ok(Self { spec, shift, entries })
    }
}

/// Loaded dataset with images quantized as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Image>,
    pub labels: Option<Vec<LabelGrid>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Generates `count` scenes into `dir`, optionally shifted, with or without labels.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, count: usize, shift: Option<&ShiftSpec>, labeled: bool) -> Result<Manifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("dataset must contain at least one scene"));
    }
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        if sub == "labels" && !labeled {
            continue;
        }
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let scene = generate_scene(spec, i)?;
        let image = match shift {
            Some(s) => apply_domain_shift(&scene.image, &s.shift, s.seed, i)?,
            None => scene.image,
        };
        let image_path = format!("images/{i:04}.ppm");
        write_ppm(&dir.join(&image_path), &image)?;
        let label_path = if labeled {
            let p = format!("labels/{i:04}.pgm");
            write_pgm(&dir.join(&p), &scene.labels)?;
            Some(p)
        } else {
            None
        };
        entries.push(ManifestEntry {
            index: i,
            image_path,
            label_path,
        });
    }
    let manifest = Manifest {
        spec: *spec,
        shift: shift.copied(),
        entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text).map_err(|msg| Error::data(&path, msg))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let side = manifest.spec.side;
    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut labels = manifest.is_labeled().then(Vec::new);
    for e in &manifest.entries {
        let path = dir.join(&e.image_path);
        let img = read_ppm(&path)?;
        if img.height() != side || img.width() != side {
            return Err(Error::data(&path, format!("image is {}x{}, manifest says {side}", img.width(), img.height())));
        }
        images.push(img);
        if let (Some(l), Some(p)) = (labels.as_mut(), &e.label_path) {
            let path = dir.join(p);
            let grid = read_pgm(&path, manifest.spec.num_classes)?;
            if grid.shape().0 != side || grid.shape().1 != side {
                return Err(Error::data(&path, "label grid does not match the manifest side"));
            }
            l.push(grid);
        }
    }
    Ok(Dataset {
        manifest,
        images,
        labels,
    })
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.data().iter().map(|v| quantize(*v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, data) = parse_pnm(&bytes, b"P6", 3).map_err(|msg| Error::data(path, msg))?;
    Image::new(h, w, data.iter().map(|&b| b as f64 / 255.0).collect())
        .map_err(|e| Error::data(path, e.to_string()))
}

pub fn write_pgm(path: &Path, labels: &LabelGrid) -> Result<()> {
    let (h, w, _) = labels.shape();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        labels
            .labels()
            .iter()
            .zip(labels.ignore_mask())
            .map(|(&l, &ig)| if ig { IGNORE_LABEL } else { l as u8 }),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path, num_classes: usize) -> Result<LabelGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, data) = parse_pnm(&bytes, b"P5", 1).map_err(|msg| Error::data(path, msg))?;
    let ignore: Vec<bool> = data.iter().map(|&b| b == IGNORE_LABEL).collect();
    let labels: Vec<usize> = data.iter().map(|&b| if b == IGNORE_LABEL { 0 } else { b as usize }).collect();
    LabelGrid::new(h, w, num_classes, labels, ignore).map_err(|e| Error::data(path, e.to_string()))
}

fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8], channels: usize) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("bad magic bytes, expected {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed header".into());
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval {maxval} is unsupported, expected 255"));
    }
    if w == 0 || h == 0 {
        return Err("zero image dimension".into());
    }
    let expected = w * h * channels;
    let data = &bytes[pos..];
    if data.len() != expected {
        return Err(format!("expected {expected} pixel bytes, found {}", data.len()));
    }
    Ok((w, h, data))
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            spec: SceneSpec { seed: 9, ..Default::default() },
            shift: Some(ShiftSpec {
                shift: DomainShift {
                    channel_gain: [0.5, 1.25, 1.0 / 3.0],
                    channel_bias: [0.1, -0.2, 0.0],
                    noise_sigma: 0.05,
                    texture_freq: 2.0,
                },
                seed: 77,
            }),
            entries: vec![ManifestEntry {
                index: 0,
                image_path: "images/0000.ppm".into(),
                label_path: None,
            }],
        };
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_inconsistency() {
        let base = "# otseg-dataset side=8 num_classes=4 shapes_min=0 shapes_max=1 seed=1 count=2 shift=none\n";
        assert!(Manifest::parse(&format!("{base}0,a.ppm,a.pgm\n")).unwrap_err().contains("2 entries"));
        assert!(Manifest::parse(&format!("{base}0,a.ppm,a.pgm\n1,b.ppm,none\n")).unwrap_err().contains("mixes"));
        assert!(Manifest::parse("0,a.ppm,none\n").is_err());
    }

    #[test]
    fn pnm_header_accepts_comments() {
        let bytes = b"P5\n# comment\n2 1\n255\n\x01\x02";
        let (w, h, data) = parse_pnm(bytes, b"P5", 1).unwrap();
        assert_eq!((w, h, data), (2, 1, &b"\x01\x02"[..]));
        assert!(parse_pnm(b"P5\n2 1\n65535\n\x00\x00", b"P5", 1).is_err());
        assert!(parse_pnm(b"P5\n2 1\n255\n\x00", b"P5", 1).is_err());
    }
}
