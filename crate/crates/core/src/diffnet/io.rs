//! Model persistence, text format `PRDF v1`.
//!
//! Line 1: `PRDF v1`. Line 2: `input_dim num_classes num_layers`. Then per
//! layer a header `rows cols activation`, `rows` lines of row-major weights
//! and one bias line, all space-separated decimals with 17 significant
//! digits so a save/load round trip is exact in f64.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffnet::{Activation, Classifier, Layer};
use crate::error::{Error, Result};
use crate::num::{real, to_f64, Real};
use crate::vector::Vector;

pub const FORMAT_VERSION: &str = "PRDF v1";

pub fn to_string<R: Real>(model: &Classifier<R>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_VERSION}");
    let _ = writeln!(
        out,
        "{} {} {}",
        model.input_dim(),
        model.num_classes(),
        model.layers().len()
    );
    for layer in model.layers() {
        let _ = writeln!(
            out,
            "{} {} {}",
            layer.rows(),
            layer.cols(),
            layer.activation().name()
        );
        for i in 0..layer.rows() {
            let row: Vec<String> = (0..layer.cols())
                .map(|j| format!("{:.16e}", to_f64(layer.weights()[i * layer.cols() + j])))
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        let bias: Vec<String> = (0..layer.rows())
            .map(|i| format!("{:.16e}", to_f64(layer.bias()[i])))
            .collect();
        let _ = writeln!(out, "{}", bias.join(" "));
    }
    out
}

pub fn save<R: Real>(model: &Classifier<R>, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model))?;
    Ok(())
}

struct Lines<'a> {
    iter: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.iter.next().ok_or(Error::ModelFormat {
            line: self.line_no,
            msg: "unexpected end of file".into(),
        })
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::ModelFormat {
            line: self.line_no,
            msg: msg.into(),
        }
    }
}

fn parse_usize(lines: &Lines<'_>, tok: &str, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| lines.err(format!("invalid {what}: {tok:?}")))
}

fn parse_floats<R: Real>(lines: &Lines<'_>, s: &str, expect: usize) -> Result<Vec<R>> {
    let vals: Vec<R> = s
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| lines.err(format!("invalid number: {tok:?}")))
                .and_then(|v| {
                    if v.is_finite() {
                        Ok(real::<R>(v))
                    } else {
                        Err(lines.err(format!("non-finite value: {tok}")))
                    }
                })
        })
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(lines.err(format!("expected {expect} values, got {}", vals.len())));
    }
    Ok(vals)
}

pub fn from_string<R: Real>(text: &str) -> Result<Classifier<R>> {
    let mut lines = Lines {
        iter: text.lines(),
        line_no: 0,
    };
    let version = lines.next()?.trim();
    if version != FORMAT_VERSION {
        return Err(lines.err(format!("unknown format version: {version:?}")));
    }
    let header = lines.next()?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(lines.err("header must be: input_dim num_classes num_layers"));
    }
    let input_dim = parse_usize(&lines, toks[0], "input_dim")?;
    let num_classes = parse_usize(&lines, toks[1], "num_classes")?;
    let num_layers = parse_usize(&lines, toks[2], "num_layers")?;
    if input_dim == 0 || num_classes == 0 || num_layers == 0 {
        return Err(lines.err("dimensions must be positive"));
    }

    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let header = lines.next()?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(lines.err("layer header must be: rows cols activation"));
        }
        let rows = parse_usize(&lines, toks[0], "rows")?;
        let cols = parse_usize(&lines, toks[1], "cols")?;
        let activation = Activation::parse(toks[2])
            .ok_or_else(|| lines.err(format!("unknown activation: {:?}", toks[2])))?;
        let mut weights = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = lines.next()?;
            weights.extend(parse_floats::<R>(&lines, row, cols)?);
        }
        let bias_line = lines.next()?;
        let bias = parse_floats::<R>(&lines, bias_line, rows)?;
        layers.push(Layer::new(
            rows,
            cols,
            activation,
            Vector::new(weights),
            Vector::new(bias),
        )?);
    }

    let model = Classifier::new(layers)?;
    if model.input_dim() != input_dim || model.num_classes() != num_classes {
        return Err(lines.err(format!(
            "layer shapes disagree with header ({} -> {} vs {} -> {})",
            model.input_dim(),
            model.num_classes(),
            input_dim,
            num_classes
        )));
    }
    Ok(model)
}

pub fn load<R: Real>(path: &Path) -> Result<Classifier<R>> {
    from_string(&std::fs::read_to_string(path)?)
}
