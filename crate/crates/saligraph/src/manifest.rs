//! Dataset manifests and the zero-dependency PGM image I/O they rely on.
//! A manifest is one JSON file per split listing images, per-object class
//! labels and mask paths, relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocols::{Mask, Sample, SampleObject};
use crate::shapes::{generate_split, Scene, CLASS_NAMES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    /// True for splits whose samples must carry >= 2 distinct classes
    /// (the pointing-game invariant).
    pub multi_class: bool,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub objects: Vec<ManifestObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObject {
    pub class: String,
    pub class_index: usize,
    pub mask: String,
}

/// Binary 8-bit PGM (P5) writer.
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::InvalidArgument(format!(
            "pgm: {height}x{width} needs {} bytes, got {}",
            height * width,
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Binary 8-bit PGM (P5) reader.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err("not a binary PGM (P5) file".into());
    }
    let width: usize = token(bytes)?.parse().map_err(|_| "bad width")?;
    let height: usize = token(bytes)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let expected = width * height;
    if bytes.len() < pos + expected {
        return Err(format!(
            "truncated pixel data: expected {expected} bytes, found {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok((height, width, bytes[pos..pos + expected].to_vec()))
}

pub fn image_from_u8(height: usize, width: usize, pixels: &[u8]) -> Tensor {
    Tensor::from_parts(
        vec![1, height, width],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
}

fn mask_from_u8(height: usize, width: usize, pixels: &[u8]) -> Mask {
    Mask {
        height,
        width,
        bits: pixels.iter().map(|&p| p >= 128).collect(),
    }
}

/// Reads a manifest and resolves every entry into a validated `Sample`.
/// Validation is fail-fast but exhaustive: the error lists every invalid
/// entry, not just the first.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let (_, samples) = load_manifest_full(path)?;
    Ok(samples)
}

pub fn load_manifest_full(path: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("malformed manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut problems = Vec::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        match load_entry(&manifest, base, entry) {
            Ok(sample) => match sample.validate(manifest.multi_class) {
                Ok(()) => samples.push(sample),
                Err(e) => problems.push(format!("entry {i} ({}): {e}", entry.image)),
            },
            Err(e) => problems.push(format!("entry {i} ({}): {e}", entry.image)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(format!(
            "{} invalid entries:\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }
    Ok((manifest, samples))
}

fn load_entry(manifest: &Manifest, base: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let (h, w, pixels) = read_pgm(&base.join(&entry.image))?;
    let image = image_from_u8(h, w, &pixels);
    let mut objects = Vec::with_capacity(entry.objects.len());
    for obj in &entry.objects {
        if obj.class_index >= manifest.classes.len() {
            return Err(Error::Manifest(format!(
                "class index {} out of range for {} classes",
                obj.class_index,
                manifest.classes.len()
            )));
        }
        if manifest.classes[obj.class_index] != obj.class {
            return Err(Error::Manifest(format!(
                "class name {:?} does not match vocabulary entry {:?} at index {}",
                obj.class, manifest.classes[obj.class_index], obj.class_index
            )));
        }
        let (mh, mw, mask_pixels) = read_pgm(&base.join(&obj.mask))?;
        if mh != h || mw != w {
            return Err(Error::Manifest(format!(
                "mask {} is {mh}x{mw} but image is {h}x{w}",
                obj.mask
            )));
        }
        objects.push(SampleObject {
            class_index: obj.class_index,
            mask: mask_from_u8(mh, mw, &mask_pixels),
        });
    }
    Ok(Sample { image, objects })
}

/// Paths produced by dataset generation.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

/// Generates the shapes benchmark under `out_dir`: a single-label
/// training split and a two-object evaluation split, each with its own
/// manifest. Byte-for-byte deterministic in (count, extent, seed).
pub fn generate_shapes_dataset(
    out_dir: &Path,
    count: usize,
    extent: usize,
    seed: u64,
) -> Result<DatasetPaths> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    // Decorrelate the two splits while keeping both seeded.
    let eval_scenes = generate_split(extent, count, seed, true)?;
    let train_scenes = generate_split(extent, count, seed ^ 0x9e37_79b9_7f4a_7c15, false)?;

    let eval_manifest = write_split(&out_dir.join("eval"), &eval_scenes, true)?;
    let train_manifest = write_split(&out_dir.join("train"), &train_scenes, false)?;
    Ok(DatasetPaths {
        root: out_dir.to_path_buf(),
        train_manifest,
        eval_manifest,
    })
}

fn write_split(dir: &Path, scenes: &[Scene], multi_class: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
        let image_name = format!("img_{i:04}.pgm");
        write_pgm(&dir.join(&image_name), h, w, &scene.pixels_u8())?;
        let mut objects = Vec::new();
        for (j, (spec, mask)) in scene.objects.iter().enumerate() {
            let mask_name = format!("img_{i:04}_mask{j}_{}.pgm", spec.class.name());
            let pixels: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_pgm(&dir.join(&mask_name), h, w, &pixels)?;
            objects.push(ManifestObject {
                class: spec.class.name().to_string(),
                class_index: spec.class.index(),
                mask: mask_name,
            });
        }
        entries.push(ManifestEntry { image: image_name, objects });
    }
    let manifest = Manifest {
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        multi_class,
        entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(&path, json + "\n")?;
    Ok(path)
}

/// Training pairs (image, label) from a single-label manifest.
pub fn training_pairs(samples: &[Sample]) -> Result<Vec<(Tensor, usize)>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.objects.len() != 1 {
                return Err(Error::Manifest(format!(
                    "training entry {i} must have exactly one object, got {}",
                    s.objects.len()
                )));
            }
            Ok((s.image.clone(), s.objects[0].class_index))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn dir_digest(dir: &Path) -> Vec<u8> {
        let mut names: Vec<PathBuf> = walk(dir);
        names.sort();
        let mut hasher = Sha256::new();
        for name in names {
            hasher.update(name.to_string_lossy().as_bytes());
            hasher.update(fs::read(&name).unwrap());
        }
        hasher.finalize().to_vec()
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out
    }

    #[test]
    fn generated_dataset_round_trips_and_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let paths_a = generate_shapes_dataset(dir_a.path(), 3, 32, 42).unwrap();
        generate_shapes_dataset(dir_b.path(), 3, 32, 42).unwrap();
        assert_eq!(dir_digest(dir_a.path()), dir_digest(dir_b.path()));

        let eval = load_manifest(&paths_a.eval_manifest).unwrap();
        assert_eq!(eval.len(), 3);
        for s in &eval {
            assert_eq!(s.objects.len(), 2);
            s.validate(true).unwrap();
        }
        let train = load_manifest(&paths_a.train_manifest).unwrap();
        let pairs = training_pairs(&train).unwrap();
        assert_eq!(pairs.len(), 3);
    }

    #[test]
    fn loaded_images_match_generated_scenes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_shapes_dataset(dir.path(), 2, 32, 9).unwrap();
        let scenes = generate_split(32, 2, 9, true).unwrap();
        let samples = load_manifest(&paths.eval_manifest).unwrap();
        for (scene, sample) in scenes.iter().zip(&samples) {
            assert!(scene.image.bits_eq(&sample.image));
        }
    }

    #[test]
    fn wrong_extent_mask_is_reported_with_its_entry() {
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_shapes_dataset(dir.path(), 2, 32, 1).unwrap();
        // Corrupt one mask by rewriting it at the wrong size.
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&paths.eval_manifest).unwrap()).unwrap();
        let victim = dir.path().join("eval").join(&manifest.entries[1].objects[0].mask);
        write_pgm(&victim, 16, 16, &vec![0u8; 256]).unwrap();
        let err = load_manifest(&paths.eval_manifest).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("entry 1"), "{msg}");
        assert!(msg.contains("16x16"), "{msg}");
    }

    #[test]
    fn empty_manifest_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            multi_class: true,
            entries: vec![],
        };
        let path = dir.path().join("manifest.json");
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let samples = load_manifest(&path).unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn missing_files_and_bad_classes_are_all_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("ok.pgm"), 8, 8, &vec![0u8; 64]).unwrap();
        write_pgm(&dir.path().join("m.pgm"), 8, 8, &vec![255u8; 64]).unwrap();
        let manifest = Manifest {
            classes: vec!["square".into(), "disk".into()],
            multi_class: false,
            entries: vec![
                ManifestEntry {
                    image: "missing.pgm".into(),
                    objects: vec![],
                },
                ManifestEntry {
                    image: "ok.pgm".into(),
                    objects: vec![ManifestObject {
                        class: "disk".into(),
                        class_index: 7,
                        mask: "m.pgm".into(),
                    }],
                },
            ],
        };
        let path = dir.path().join("manifest.json");
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("2 invalid entries"), "{err}");
        assert!(err.contains("entry 0"), "{err}");
        assert!(err.contains("entry 1"), "{err}");
    }

    #[test]
    fn pgm_parser_rejects_garbage() {
        assert!(parse_pgm(b"P6\n2 2\n255\nxxxx").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\nxx").is_err());
        let good = b"P5\n2 2\n255\nabcd";
        let (h, w, px) = parse_pgm(good).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(px, b"abcd");
    }
}
