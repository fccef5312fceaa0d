//! Text checkpoints.
//!
//! ```text
//! pwvae-ckpt v1
//! variant h
//! vocab 200
//! hidden 100
//! gauss_dims 50
//! piece_dims 50
//! pieces 5
//! activation prelu
//! transform none
//! params 22
//! enc.e0 100 200
//! <row-major values, one matrix row per line>
//! ...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nvdm::{ModelConfig, NvdmModel};

pub const MAGIC: &str = "pwvae-ckpt v1";

pub fn to_text(model: &NvdmModel) -> String {
    let c = &model.config;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "variant {}", c.variant);
    let _ = writeln!(s, "vocab {}", c.vocab_size);
    let _ = writeln!(s, "hidden {}", c.hidden);
    let _ = writeln!(s, "gauss_dims {}", c.gauss_dims);
    let _ = writeln!(s, "piece_dims {}", c.piece_dims);
    let _ = writeln!(s, "pieces {}", c.pieces);
    let _ = writeln!(s, "activation {}", c.activation);
    let _ = writeln!(s, "transform {}", c.transform);
    let params = model.params();
    let _ = writeln!(s, "params {}", params.len());
    for p in params {
        let _ = writeln!(s, "{} {} {}", p.name, p.rows(), p.cols());
        for row in p.data.chunks(p.cols()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
    }
    s
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("line {line}: {msg}"))
}

fn header_field<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str) -> Result<(usize, &'a str)> {
    let (n, line) = lines.next().ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
    match line.split_once(' ') {
        Some((k, v)) if k == key => Ok((n, v.trim())),
        _ => Err(bad(n, format!("expected `{key} <value>`, found `{line}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(n: usize, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(n, format!("bad number `{v}`")))
}

pub fn from_text(text: &str) -> Result<NvdmModel> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(Error::Checkpoint(format!("missing `{MAGIC}` header"))),
    }
    let (n, v) = header_field(&mut lines, "variant")?;
    let variant = v.parse().map_err(|e| bad(n, e))?;
    let (n, v) = header_field(&mut lines, "vocab")?;
    let vocab_size = parse_num(n, v)?;
    let mut config = ModelConfig::new(variant, vocab_size);
    let (n, v) = header_field(&mut lines, "hidden")?;
    config.hidden = parse_num(n, v)?;
    let (n, v) = header_field(&mut lines, "gauss_dims")?;
    config.gauss_dims = parse_num(n, v)?;
    let (n, v) = header_field(&mut lines, "piece_dims")?;
    config.piece_dims = parse_num(n, v)?;
    let (n, v) = header_field(&mut lines, "pieces")?;
    config.pieces = parse_num(n, v)?;
    let (n, v) = header_field(&mut lines, "activation")?;
    config.activation = v.parse().map_err(|e| bad(n, e))?;
    let (n, v) = header_field(&mut lines, "transform")?;
    config.transform = v.parse().map_err(|e| bad(n, e))?;
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut model = NvdmModel::new(config, 0)?;
    let (n, v) = header_field(&mut lines, "params")?;
    let count: usize = parse_num(n, v)?;
    let expected = model.params().len();
    if count != expected {
        return Err(bad(n, format!("{count} parameters, model needs {expected}")));
    }
    for p in model.params_mut() {
        let (n, head) = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
        let parts: Vec<&str> = head.split(' ').collect();
        let shape_ok = parts.len() == 3
            && parts[0] == p.name
            && parts[1].parse() == Ok(p.rows())
            && parts[2].parse() == Ok(p.cols());
        if !shape_ok {
            return Err(bad(
                n,
                format!("expected `{} {} {}`, found `{head}`", p.name, p.rows(), p.cols()),
            ));
        }
        let mut values = Vec::with_capacity(p.len());
        for _ in 0..p.rows() {
            let (n, row) = lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("truncated parameter `{}`", p.name)))?;
            let before = values.len();
            for tok in row.split(' ') {
                let v: f64 = parse_num(n, tok)?;
                if !v.is_finite() {
                    return Err(bad(n, "non-finite value"));
                }
                values.push(v);
            }
            if values.len() - before != p.cols() {
                return Err(bad(n, format!("expected {} values", p.cols())));
            }
        }
        p.data = values;
    }
    if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(bad(n, format!("trailing content `{l}`")));
    }
    Ok(model)
}

pub fn save(model: &NvdmModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NvdmModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
