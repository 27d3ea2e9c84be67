//! Model checkpoints: a text manifest (config echo plus the ordered named
//! parameter list) next to one blob file holding the tensor containers in
//! manifest order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{PcrConfig, PcrModel};
use crate::params::ParamId;
use crate::tensor::{io as tensor_io, Shape, Tensor};

const MANIFEST: &str = "manifest.txt";
const BLOBS: &str = "params.bin";
const FORMAT_LINE: &str = "format pcr-checkpoint 1";

fn join_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes `manifest.txt` and `params.bin` under `dir`, creating it.
pub fn save_model(model: &mut PcrModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let cfg = model.config.clone();

    let mut manifest = String::new();
    manifest.push_str(FORMAT_LINE);
    manifest.push('\n');
    manifest.push_str(&format!("k {}\n", cfg.cams_per_decoder));
    manifest.push_str(&format!("l {}\n", cfg.levels));
    manifest.push_str(&format!("channels {}\n", join_list(&cfg.channels)));
    manifest.push_str(&format!("joints {}\n", cfg.joints));
    manifest.push_str(&format!("input_h {}\n", cfg.input_h));
    manifest.push_str(&format!("input_w {}\n", cfg.input_w));
    manifest.push_str(&format!("image_channels {}\n", cfg.image_channels));
    manifest.push_str(&format!("aux {}\n", cfg.aux_enabled));
    manifest.push_str(&format!("encoder_channels {}\n", join_list(&cfg.encoder_channels)));

    let blob_path = dir.join(BLOBS);
    let mut blobs = BufWriter::new(fs::File::create(&blob_path)?);

    for (name, tensor) in model.store().iter() {
        let s = tensor.shape();
        manifest.push_str(&format!("param {name} {} {} {} {}\n", s.n, s.c, s.h, s.w));
        tensor_io::write_tensor(&mut blobs, tensor)?;
    }
    // Batch-norm running statistics ride along as named buffers.
    let mut buffers: Vec<(String, Tensor)> = Vec::new();
    model.visit_bn_states(&mut |name, state| {
        let c = state.channels();
        let mean = Tensor::from_vec(Shape::new(1, c, 1, 1), state.running_mean.clone())
            .expect("running stats are finite");
        let var = Tensor::from_vec(Shape::new(1, c, 1, 1), state.running_var.clone())
            .expect("running stats are finite");
        buffers.push((format!("{name}.running_mean"), mean));
        buffers.push((format!("{name}.running_var"), var));
    });
    for (name, tensor) in &buffers {
        let s = tensor.shape();
        manifest.push_str(&format!("buffer {name} {} {} {} {}\n", s.n, s.c, s.h, s.w));
        tensor_io::write_tensor(&mut blobs, tensor)?;
    }
    blobs.flush()?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory. The manifest's parameter
/// order must match the reconstructed model's registration order exactly.
pub fn load_model(dir: impl AsRef<Path>) -> Result<PcrModel> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(Error::Data("unrecognized checkpoint format".into()));
    }

    let mut cfg = PcrConfig::default_full();
    let mut entries: Vec<(bool, String, Shape)> = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let parse_usize = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Data(format!("bad manifest value '{s}'")))
        };
        let parse_list = |s: &str| -> Result<Vec<usize>> {
            s.split(',').map(parse_usize).collect()
        };
        match key {
            "k" => cfg.cams_per_decoder = parse_usize(rest[0])?,
            "l" => cfg.levels = parse_usize(rest[0])?,
            "channels" => cfg.channels = parse_list(rest[0])?,
            "joints" => cfg.joints = parse_usize(rest[0])?,
            "input_h" => cfg.input_h = parse_usize(rest[0])?,
            "input_w" => cfg.input_w = parse_usize(rest[0])?,
            "image_channels" => cfg.image_channels = parse_usize(rest[0])?,
            "aux" => cfg.aux_enabled = rest[0] == "true",
            "encoder_channels" => cfg.encoder_channels = parse_list(rest[0])?,
            "param" | "buffer" => {
                if rest.len() != 5 {
                    return Err(Error::Data(format!("bad manifest entry '{line}'")));
                }
                entries.push((
                    key == "param",
                    rest[0].to_string(),
                    Shape::new(
                        parse_usize(rest[1])?,
                        parse_usize(rest[2])?,
                        parse_usize(rest[3])?,
                        parse_usize(rest[4])?,
                    ),
                ));
            }
            other => return Err(Error::Data(format!("unknown manifest key '{other}'"))),
        }
    }

    let mut model = PcrModel::new(cfg, 0)?;
    let mut blobs = BufReader::new(fs::File::open(dir.join(BLOBS))?);

    let param_count = model.store().len();
    let mut entry_iter = entries.iter();
    for i in 0..param_count {
        let id = ParamId::from_index_pub(i);
        let (is_param, name, shape) = entry_iter
            .next()
            .ok_or_else(|| Error::Data("manifest ended before parameters did".into()))?;
        if !is_param || name != model.store().name(id) || *shape != model.store().tensor(id).shape() {
            return Err(Error::Data(format!(
                "manifest entry '{name}' does not match parameter '{}'",
                model.store().name(id)
            )));
        }
        let tensor = tensor_io::read_tensor(&mut blobs)?;
        if tensor.shape() != *shape {
            return Err(Error::Data(format!("blob shape mismatch for '{name}'")));
        }
        *model.store_mut().tensor_mut(id) = tensor;
    }

    // Remaining entries are batch-norm buffers, two per state.
    let rest: Vec<(bool, String, Shape)> = entry_iter.cloned().collect();
    let mut tensors = Vec::with_capacity(rest.len());
    for (is_param, name, shape) in &rest {
        if *is_param {
            return Err(Error::Data(format!("unexpected trailing parameter '{name}'")));
        }
        let tensor = tensor_io::read_tensor(&mut blobs)?;
        if tensor.shape() != *shape {
            return Err(Error::Data(format!("blob shape mismatch for '{name}'")));
        }
        tensors.push(tensor);
    }
    let mut trailing = [0u8; 1];
    if blobs.read(&mut trailing)? != 0 {
        return Err(Error::Data("trailing bytes after the last blob".into()));
    }

    let mut idx = 0usize;
    let mut fill_err = None;
    model.visit_bn_states(&mut |name, state| {
        if fill_err.is_some() {
            return;
        }
        for suffix in ["running_mean", "running_var"] {
            let expected = format!("{name}.{suffix}");
            match rest.get(idx) {
                Some((_, entry_name, _)) if *entry_name == expected => {
                    let data = tensors[idx].data().to_vec();
                    if suffix == "running_mean" {
                        state.running_mean = data;
                    } else {
                        state.running_var = data;
                    }
                    idx += 1;
                }
                _ => fill_err = Some(expected),
            }
        }
    });
    if let Some(name) = fill_err {
        return Err(Error::Data(format!("checkpoint is missing buffer '{name}'")));
    }
    if idx != rest.len() {
        return Err(Error::Data("checkpoint holds extra buffers".into()));
    }
    Ok(model)
}
