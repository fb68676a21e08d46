//! Dataset dump: binary PGM images, one JSON metadata line per sample and a
//! key=value manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dataset, Image, Manifest, PhantomAttrs, PhantomSample, PostureParams, K_LABELS};
use crate::fsio::atomic_write;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DumpError + '_ {
    move |source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> DumpError {
    DumpError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    index: usize,
    attrs: PhantomAttrs,
    psi_true: PostureParams,
    report: String,
    labels: [u8; K_LABELS],
}

/// Encodes an image as binary 8-bit PGM.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic {})", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let body = bytes.get(pos..pos + w * h).ok_or("truncated pixel data")?;
    let px = body.iter().map(|&b| b as f64 / max as f64).collect();
    Image::new(h, w, px).map_err(|e| e.to_string())
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Writes the dataset under `dir`. `extra` lines are appended to the
/// manifest after the standard fields.
pub fn write_dataset(dir: &Path, data: &Dataset, extra: &[(String, String)]) -> Result<(), DumpError> {
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let mut meta = String::new();
        for (i, s) in samples.iter().enumerate() {
            let path = sub.join(format!("{i}.pgm"));
            atomic_write(&path, &encode_pgm(&s.image)).map_err(io_err(&path))?;
            let line = MetaLine {
                index: i,
                attrs: s.attrs.clone(),
                psi_true: s.psi_true,
                report: s.report.clone(),
                labels: s.labels,
            };
            meta.push_str(&serde_json::to_string(&line).expect("metadata serializes"));
            meta.push('\n');
        }
        let path = sub.join("meta.jsonl");
        atomic_write(&path, meta.as_bytes()).map_err(io_err(&path))?;
    }
    let mut text = data.manifest.to_text();
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    let path = dir.join("manifest.txt");
    atomic_write(&path, text.as_bytes()).map_err(io_err(&path))
}

fn read_split(dir: &Path, split: &str, expected: usize) -> Result<Vec<PhantomSample>, DumpError> {
    let sub = dir.join(split);
    let meta_path = sub.join("meta.jsonl");
    let file = fs::File::open(&meta_path).map_err(io_err(&meta_path))?;
    let mut out = Vec::with_capacity(expected);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(&meta_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MetaLine = serde_json::from_str(&line).map_err(|e| fmt_err(&meta_path, e.to_string()))?;
        if m.index != out.len() {
            return Err(fmt_err(&meta_path, format!("index {} out of order", m.index)));
        }
        let img_path = sub.join(format!("{}.pgm", m.index));
        let bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
        let image = decode_pgm(&bytes).map_err(|e| fmt_err(&img_path, e))?;
        out.push(PhantomSample {
            image,
            attrs: m.attrs,
            psi_true: m.psi_true,
            report: m.report,
            labels: m.labels,
        });
    }
    if out.len() != expected {
        return Err(fmt_err(
            &meta_path,
            format!("manifest lists {expected} samples, found {}", out.len()),
        ));
    }
    Ok(out)
}

/// Reads a dataset written by [`write_dataset`], returning the extra
/// manifest keys alongside it. Pixels come back quantized to 8 bits.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, BTreeMap<String, String>), DumpError> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut kv = parse_kv(&text).map_err(|e| fmt_err(&path, e))?;
    let mut take = |k: &str| -> Result<String, DumpError> {
        kv.remove(k).ok_or_else(|| fmt_err(&path, format!("missing `{k}`")))
    };
    let (seed, n_train, n_test, size, version) = (
        take("seed")?,
        take("n_train")?,
        take("n_test")?,
        take("image_size")?,
        take("version")?,
    );
    let bad = |k: &str| fmt_err(&path, format!("bad value for `{k}`"));
    let manifest = Manifest {
        seed: seed.parse().map_err(|_| bad("seed"))?,
        n_train: n_train.parse().map_err(|_| bad("n_train"))?,
        n_test: n_test.parse().map_err(|_| bad("n_test"))?,
        image_size: size.parse().map_err(|_| bad("image_size"))?,
        version: version.parse().map_err(|_| bad("version"))?,
    };
    let train = read_split(dir, "train", manifest.n_train)?;
    let test = read_split(dir, "test", manifest.n_test)?;
    Ok((Dataset { train, test, manifest }, kv))
}

#[cfg(test)]
mod tests {
    use super::super::make_dataset;
    use super::*;

    #[test]
    fn pgm_round_trip_is_eight_bit_exact() {
        let img = Image::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back.dims(), (2, 3));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn dump_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_dataset(3, 5, 3).unwrap();
        let extra = vec![("config_hash".to_string(), "abc".to_string())];
        write_dataset(dir.path(), &data, &extra).unwrap();
        let (back, kv) = read_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, data.manifest);
        assert_eq!(kv.get("config_hash").map(String::as_str), Some("abc"));
        for (a, b) in data.train.iter().zip(&back.train) {
            assert_eq!(a.report, b.report);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.psi_true, b.psi_true);
            assert!(a.image.mean_abs_diff(&b.image).unwrap() < 0.002);
        }
        assert!(dir.path().join("test/2.pgm").exists());
    }
}
