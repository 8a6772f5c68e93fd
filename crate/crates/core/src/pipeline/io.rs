//! Checkpoints and binary PPM images.
//!
//! A checkpoint directory holds one `<parameter path>.mgt` file per
//! parameter and a `manifest.txt`:
//!
//! ```text
//! dtype f64
//! param encoder.stage1.down.weight 8x3x3x3
//! ...
//! config
//! height = 16
//! ...
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{mgt, shape_str, Scalar, Tensor};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::model::Model;

pub const MANIFEST: &str = "manifest.txt";

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("dtype {}\n", T::NAME);
    for (_, p) in model.params.iter() {
        mgt::write(&dir.join(format!("{}.mgt", p.name)), &p.value)?;
        manifest.push_str(&format!("param {} {}\n", p.name, shape_str(p.value.shape())));
    }
    manifest.push_str("config\n");
    manifest.push_str(&model.config().to_text());
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// The configuration stored in a checkpoint's manifest.
pub fn checkpoint_config(dir: &Path) -> Result<PipelineConfig> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (_, config) = text
        .split_once("\nconfig\n")
        .ok_or_else(|| Error::format(&path, "missing `config` section"))?;
    PipelineConfig::from_text(config).map_err(|e| Error::format(&path, e.to_string()))
}

/// Rebuild the architecture from the stored config and load every tensor.
/// Parameters are converted to `T` if the checkpoint used the other dtype.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    let cfg = checkpoint_config(dir)?;
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let head = text.split_once("\nconfig\n").map_or("", |(h, _)| h);
    let mut model = Model::<T>::new(&cfg)?;
    let mut stored = Vec::new();
    for (i, line) in head.lines().enumerate() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["dtype", "f32" | "f64"] => {}
            ["param", name, shape] => stored.push((name.to_string(), shape.to_string())),
            _ => return Err(Error::format(&path, format!("line {}: cannot parse `{line}`", i + 1))),
        }
    }
    if stored.len() != model.params.len() {
        return Err(Error::format(
            &path,
            format!("{} parameters listed, the configured model has {}", stored.len(), model.params.len()),
        ));
    }
    for ((name, shape), p) in stored.iter().zip(model.params.iter_mut()) {
        if *name != p.name || *shape != shape_str(p.value.shape()) {
            return Err(Error::format(
                &path,
                format!("listed `{name}` {shape}, model expects `{}` {}", p.name, shape_str(p.value.shape())),
            ));
        }
        let file = dir.join(format!("{name}.mgt"));
        let value = match mgt::peek_header(&fs::read(&file).map_err(|e| Error::io(&file, e))?) {
            Ok((1, _)) => mgt::read::<f32>(&file)?.cast(),
            Ok(_) => mgt::read::<f64>(&file)?.cast(),
            Err(d) => return Err(Error::format(&file, d)),
        };
        if value.shape() != p.value.shape() {
            return Err(Error::format(&file, format!("shape {:?}, expected {:?}", value.shape(), p.value.shape())));
        }
        p.value = value;
    }
    Ok(model)
}

/// Write an `H×W×3` image with values in `[0,1]` as 8-bit binary PPM.
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dim("write_ppm", format!("expected H×W×3, got {s:?}")));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read an 8-bit binary PPM into `H×W×3` values in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h * 3 {
        return Err(bad(&format!("payload is {} bytes, expected {}", data.len(), w * h * 3)));
    }
    Tensor::new(&[h, w, 3], data.iter().map(|&b| b as f64 / 255.0).collect())
}
