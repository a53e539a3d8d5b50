//! Plain-text weight checkpoints.
//!
//! Layout: a `skelnet-checkpoint v1` line, `key value` header lines, then one
//! `matrix <node> <role> <rows> <cols>` line per block followed by its entries
//! row by row, one row per line. Floats use Rust's shortest round-trip
//! formatting, so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{Architecture, NetworkError, Params, RealizedNetwork};
use crate::rng::ParamRole;
use crate::skeleton::Skeleton;

const MAGIC: &str = "skelnet-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("checkpoint was written for skeleton {found}, not {expected}")]
    SkeletonMismatch { expected: String, found: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Header of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub skeleton_hash: String,
    pub r: usize,
    pub k: usize,
    pub d: usize,
    pub beta: f64,
    pub seed: u64,
    pub step: usize,
}

fn role_name(role: ParamRole) -> &'static str {
    match role {
        ParamRole::Internal => "int",
        ParamRole::Input => "inp",
        ParamRole::Bias => "bias",
        ParamRole::Prediction => "pred",
    }
}

fn write_matrix(out: &mut String, node: &str, role: ParamRole, m: &DMatrix<f64>) {
    let _ = writeln!(out, "matrix {node} {} {} {}", role_name(role), m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub fn to_text(net: &RealizedNetwork, meta: &CheckpointMeta) -> String {
    let skel = net.skeleton();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "skeleton_hash {}", meta.skeleton_hash);
    let _ = writeln!(out, "r {}", meta.r);
    let _ = writeln!(out, "k {}", meta.k);
    let _ = writeln!(out, "d {}", meta.d);
    let _ = writeln!(out, "beta {:?}", meta.beta);
    let _ = writeln!(out, "seed {}", meta.seed);
    let _ = writeln!(out, "step {}", meta.step);
    let params = net.params();
    for v in skel.internal_nodes() {
        let name = &skel.node(v).name;
        let nw = &params.nodes[net.arch().slot(v)];
        write_matrix(&mut out, name, ParamRole::Internal, &nw.w_int);
        write_matrix(&mut out, name, ParamRole::Input, &nw.w_inp);
        let bias = DMatrix::from_column_slice(nw.bias.len(), 1, nw.bias.as_slice());
        write_matrix(&mut out, name, ParamRole::Bias, &bias);
    }
    write_matrix(&mut out, "-", ParamRole::Prediction, &params.pred);
    out
}

pub fn save(path: &Path, net: &RealizedNetwork, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    fs::write(path, to_text(net, meta))?;
    Ok(())
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Format {
            line: self.line,
            message: message.into(),
        }
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CheckpointError> {
        let l = self.next()?;
        let value = l
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key}`")))?;
        value.parse().map_err(|_| self.err(format!("bad value for `{key}`")))
    }
}

/// Parses a checkpoint against `skeleton`, whose hash must match.
pub fn from_text(text: &str, skeleton: &Skeleton) -> Result<(RealizedNetwork, CheckpointMeta), CheckpointError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.err("not a skelnet checkpoint"));
    }
    let meta = CheckpointMeta {
        skeleton_hash: lines.field("skeleton_hash")?,
        r: lines.field("r")?,
        k: lines.field("k")?,
        d: lines.field("d")?,
        beta: lines.field("beta")?,
        seed: lines.field("seed")?,
        step: lines.field("step")?,
    };
    let expected = skeleton.content_hash();
    if meta.skeleton_hash != expected {
        return Err(CheckpointError::SkeletonMismatch {
            expected,
            found: meta.skeleton_hash,
        });
    }
    let arch = Arc::new(Architecture::new(skeleton, meta.r, meta.k, meta.d)?);
    let mut params = Params::zeros(&arch);

    let read_matrix = |lines: &mut Lines, node: &str, role: ParamRole, target: &mut DMatrix<f64>| {
        let header = lines.next()?;
        let want = format!("matrix {node} {} {} {}", role_name(role), target.nrows(), target.ncols());
        if header != want {
            return Err(lines.err(format!("expected `{want}`")));
        }
        for i in 0..target.nrows() {
            let row = lines.next()?;
            let mut count = 0;
            for (j, tok) in row.split_ascii_whitespace().enumerate() {
                if j >= target.ncols() {
                    return Err(lines.err("too many entries"));
                }
                target[(i, j)] = tok.parse().map_err(|_| lines.err(format!("bad number `{tok}`")))?;
                count += 1;
            }
            if count != target.ncols() {
                return Err(lines.err("too few entries"));
            }
        }
        Ok(())
    };

    for v in skeleton.internal_nodes() {
        let name = skeleton.node(v).name.clone();
        let nw = &mut params.nodes[arch.slot(v)];
        read_matrix(&mut lines, &name, ParamRole::Internal, &mut nw.w_int)?;
        read_matrix(&mut lines, &name, ParamRole::Input, &mut nw.w_inp)?;
        let mut bias = DMatrix::zeros(nw.bias.len(), 1);
        read_matrix(&mut lines, &name, ParamRole::Bias, &mut bias)?;
        nw.bias = DVector::from_column_slice(bias.as_slice());
    }
    read_matrix(&mut lines, "-", ParamRole::Prediction, &mut params.pred)?;
    if let Some((i, l)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(CheckpointError::Format {
            line: i + 1,
            message: format!("trailing content `{l}`"),
        });
    }
    Ok((RealizedNetwork::with_params(arch, params)?, meta))
}

pub fn load(path: &Path, skeleton: &Skeleton) -> Result<(RealizedNetwork, CheckpointMeta), CheckpointError> {
    from_text(&fs::read_to_string(path)?, skeleton)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationSpec;
    use crate::skeleton::layered;

    fn setup() -> (Skeleton, RealizedNetwork, CheckpointMeta) {
        let skel = layered(2, &[2], ActivationSpec::tanh());
        let net = RealizedNetwork::initialized(&skel, 3, 2, 4, 0.2, 9, false).unwrap();
        let meta = CheckpointMeta {
            skeleton_hash: skel.content_hash(),
            r: 3,
            k: 2,
            d: 4,
            beta: 0.2,
            seed: 9,
            step: 17,
        };
        (skel, net, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (skel, net, meta) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save(&path, &net, &meta).unwrap();
        let (back, back_meta) = load(&path, &skel).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn rejects_other_skeleton() {
        let (_, net, meta) = setup();
        let other = layered(2, &[3], ActivationSpec::tanh());
        let text = to_text(&net, &meta);
        assert!(matches!(
            from_text(&text, &other),
            Err(CheckpointError::SkeletonMismatch { .. })
        ));
    }

    #[test]
    fn rejects_truncated_and_corrupt_files() {
        let (skel, net, meta) = setup();
        let text = to_text(&net, &meta);
        let cut: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(matches!(from_text(&cut, &skel), Err(CheckpointError::Format { .. })));
        let bad = text.replacen("matrix h1_1 int", "matrix h1_1 bias", 1);
        assert!(matches!(from_text(&bad, &skel), Err(CheckpointError::Format { .. })));
        let garbage = text.replacen(&format!("{:?}", net.params().pred[(0, 0)]), "abc", 1);
        assert!(matches!(from_text(&garbage, &skel), Err(CheckpointError::Format { .. })));
    }
}
