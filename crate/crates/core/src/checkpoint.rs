//! Model checkpoints as text.
//!
//! ```text
//! nnreg-checkpoint 1
//! backend edgeconv            # or handcrafted
//! layer_widths 16 16          # empty for handcrafted
//! k_feat 8
//! feature_seed 0
//! center_block false
//! inlier_mode anchor
//! inlier_k 8
//! consistency_dim 16
//! block edgeconv.0 0 592      # name, offset, length; one line per block
//! ...
//! params 2281
//! <one value per line>
//! ```
//!
//! Values use shortest round-trip notation, so saving and loading is bit
//! exact. Blocks are checked against the layout the header implies.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{Backend, Extractor, ExtractorConfig, FeatureParams};
use crate::inlier::{InlierMode, InlierNetParams};
use crate::solver::Model;

const MAGIC: &str = "nnreg-checkpoint 1";

fn extractor_config(model: &Model) -> ExtractorConfig {
    match &model.extractor {
        Extractor::EdgeConv(p) => p.config().clone(),
        Extractor::Handcrafted => ExtractorConfig {
            backend: Backend::Handcrafted,
            layer_widths: Vec::new(),
            ..ExtractorConfig::default()
        },
    }
}

pub fn format_checkpoint(model: &Model) -> String {
    let cfg = extractor_config(model);
    let widths: Vec<String> = cfg.layer_widths.iter().map(|w| w.to_string()).collect();
    let mut out = format!(
        "{MAGIC}\nbackend {}\nlayer_widths {}\nk_feat {}\nfeature_seed {}\ncenter_block {}\n\
         inlier_mode {}\ninlier_k {}\nconsistency_dim {}\n",
        cfg.backend.name(),
        widths.join(" "),
        cfg.k_feat,
        cfg.seed,
        cfg.center_block,
        model.inlier.mode().name(),
        model.inlier.k(),
        model.inlier.consistency_dim(),
    );
    for (name, off, len) in model.blocks() {
        out.push_str(&format!("block {name} {off} {len}\n"));
    }
    let flat = model.flat();
    out.push_str(&format!("params {}\n", flat.len()));
    for v in flat {
        out.push_str(&format!("{v}\n"));
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<Model> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(0, format!("checkpoint ends before {what}")))
    };
    let (n, magic) = next("the header")?;
    if magic != MAGIC {
        return Err(Error::parse(n, format!("expected '{MAGIC}'")));
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (n, line) = next(key)?;
        let rest = line
            .strip_prefix(key)
            .filter(|r| r.is_empty() || r.starts_with(' '))
            .ok_or_else(|| Error::parse(n, format!("expected '{key}'")))?;
        Ok((n, rest.trim().to_string()))
    };
    fn value<T: std::str::FromStr>(n: usize, s: &str) -> Result<T> {
        s.parse().map_err(|_| Error::parse(n, format!("cannot parse '{s}'")))
    }
    let (n, backend) = field("backend")?;
    let backend: Backend = value(n, &backend)?;
    let (n, widths) = field("layer_widths")?;
    let layer_widths = widths
        .split_whitespace()
        .map(|w| value(n, w))
        .collect::<Result<Vec<usize>>>()?;
    let (n, k_feat) = field("k_feat")?;
    let k_feat = value(n, &k_feat)?;
    let (n, seed) = field("feature_seed")?;
    let seed = value(n, &seed)?;
    let (n, center) = field("center_block")?;
    let center_block = value(n, &center)?;
    let (n, mode) = field("inlier_mode")?;
    let mode: InlierMode = value(n, &mode)?;
    let (n, ik) = field("inlier_k")?;
    let inlier_k = value(n, &ik)?;
    let (n, cd) = field("consistency_dim")?;
    let cd = value(n, &cd)?;

    let mut blocks = Vec::new();
    let (count_line, count) = loop {
        let (n, line) = next("the parameter count")?;
        if let Some(rest) = line.strip_prefix("block ") {
            let t: Vec<&str> = rest.split_whitespace().collect();
            if t.len() != 3 {
                return Err(Error::parse(n, "expected 'block name offset length'"));
            }
            blocks.push((n, t[0].to_string(), value::<usize>(n, t[1])?, value::<usize>(n, t[2])?));
        } else if let Some(rest) = line.strip_prefix("params ") {
            break (n, value::<usize>(n, rest.trim())?);
        } else {
            return Err(Error::parse(n, "expected 'block' or 'params'"));
        }
    };
    let mut values = Vec::with_capacity(count);
    for (n, line) in lines.by_ref() {
        if line.is_empty() {
            continue;
        }
        values.push(value::<f64>(n, line.trim())?);
    }
    if values.len() != count {
        return Err(Error::parse(
            count_line,
            format!("header declares {count} parameters, file has {}", values.len()),
        ));
    }

    let ecfg = ExtractorConfig {
        backend,
        layer_widths,
        k_feat,
        seed,
        center_block,
    };
    let feature_len = match backend {
        Backend::EdgeConv => FeatureParams::param_count(&ecfg),
        Backend::Handcrafted => 0,
    };
    if feature_len > count {
        return Err(Error::parse(count_line, "too few parameters for the feature layout"));
    }
    let extractor = match backend {
        Backend::EdgeConv => Extractor::EdgeConv(FeatureParams::from_values(ecfg, values[..feature_len].to_vec())?),
        Backend::Handcrafted => Extractor::Handcrafted,
    };
    let inlier = InlierNetParams::from_values(mode, inlier_k, cd, values[feature_len..].to_vec())
        .map_err(|e| Error::parse(count_line, e.to_string()))?;
    let model = Model { extractor, inlier };
    let expected = model.blocks();
    if blocks.len() != expected.len()
        || blocks.iter().zip(&expected).any(|(b, e)| (&b.1, b.2, b.3) != (&e.0, e.1, e.2))
    {
        let line = blocks.first().map_or(count_line, |b| b.0);
        return Err(Error::parse(line, "block table does not match the declared layout"));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, format_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    parse_checkpoint(&fs::read_to_string(path)?)
}
