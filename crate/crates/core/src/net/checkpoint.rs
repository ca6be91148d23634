//! Versioned text checkpoints.
//!
//! One record per line, tokens separated by single spaces, floats in Rust's
//! shortest round-trip form so that `load(save(net)) == net` bitwise:
//!
//! ```text
//! KALNORM-CHECKPOINT 1
//! input <C> <H> <W>
//! settings <eps> <diag|full> <alpha> <r_max> <d_max>
//! layers <count>
//! layer conv <in> <out>          then: weight <len> v.., bias <len> v..
//! layer dense <in> <out>         then: weight, bias
//! layer relu | layer avgpool
//! layer norm <bn|brn|bkn> <C>    then: gamma, beta, kalman, [q_raw, gain, transition, r_raw,]
//!                                      moving_mu, moving_sigma, moving_meta
//! end
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::SplitWhitespace;

use super::layers::{Conv3x3, Dense};
use super::{Layer, NetError, Network, NormLayer, NormSettings, Result};
use crate::norm::{AffineParams, BrnClip, CovMode, Covariance, KalmanLayerParams, MovingStatistics, NormEpsilon, NormKind};
use crate::tensor::Tensor;

pub const MAGIC: &str = "KALNORM-CHECKPOINT";
pub const VERSION: u32 = 1;

fn write_vec(w: &mut impl Write, key: &str, values: &[f64]) -> std::io::Result<()> {
    write!(w, "{key} {}", values.len())?;
    for v in values {
        write!(w, " {v:?}")?;
    }
    writeln!(w)
}

pub fn save(net: &Network, w: &mut impl Write) -> Result<()> {
    writeln!(w, "{MAGIC} {VERSION}")?;
    let (c, h, wd) = net.input;
    writeln!(w, "input {c} {h} {wd}")?;
    let s = &net.settings;
    writeln!(
        w,
        "settings {:?} {} {:?} {:?} {:?}",
        s.eps.get(),
        s.mode.as_str(),
        s.alpha,
        s.brn_clip.r_max,
        s.brn_clip.d_max
    )?;
    writeln!(w, "layers {}", net.layers.len())?;
    for layer in &net.layers {
        match layer {
            Layer::Conv3x3(conv) => {
                writeln!(w, "layer conv {} {}", conv.in_channels, conv.out_channels)?;
                write_vec(w, "weight", conv.weight.data())?;
                write_vec(w, "bias", &conv.bias)?;
            }
            Layer::Dense(d) => {
                writeln!(w, "layer dense {} {}", d.in_features, d.out_features)?;
                write_vec(w, "weight", d.weight.data())?;
                write_vec(w, "bias", &d.bias)?;
            }
            Layer::Relu => writeln!(w, "layer relu")?,
            Layer::AvgPoolGlobal => writeln!(w, "layer avgpool")?,
            Layer::Norm(n) => {
                writeln!(w, "layer norm {} {}", n.kind.as_str(), n.channels)?;
                write_vec(w, "gamma", &n.affine.gamma)?;
                write_vec(w, "beta", &n.affine.beta)?;
                match &n.kalman {
                    None => writeln!(w, "kalman none")?,
                    Some(k) => {
                        writeln!(w, "kalman {} {}", k.channels(), k.prev_channels())?;
                        writeln!(w, "q_raw {:?}", k.q_raw)?;
                        match k.gain_override {
                            None => writeln!(w, "gain free")?,
                            Some(q) => writeln!(w, "gain {q:?}")?,
                        }
                        write_vec(w, "transition", k.transition.data())?;
                        write_vec(w, "r_raw", &k.r_raw)?;
                    }
                }
                write_vec(w, "moving_mu", &n.moving.mu)?;
                write_vec(w, &format!("moving_sigma {}", n.moving.sigma.mode().as_str()), n.moving.sigma.values())?;
                writeln!(w, "moving_meta {:?} {}", n.moving.alpha, n.moving.updates)?;
            }
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn save_file(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_file(path: &Path) -> Result<Network> {
    load(BufReader::new(File::open(path)?))
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

fn bad(msg: impl Into<String>) -> NetError {
    NetError::Checkpoint(msg.into())
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        self.line_no += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(bad(format!("unexpected end of file at line {}", self.line_no))),
        }
    }

    /// Reads a line that must start with `key`; returns the remaining tokens.
    fn expect(&mut self, key: &str) -> Result<Vec<String>> {
        let line = self.next_line()?;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some(k) if k == key => Ok(tokens.map(str::to_owned).collect()),
            other => Err(bad(format!("line {}: expected `{key}`, found {:?}", self.line_no, other))),
        }
    }

    fn expect_vec(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let tokens = self.expect(key)?;
        parse_vec(&tokens, len).map_err(|e| bad(format!("line {} ({key}): {e}", self.line_no)))
    }
}

fn parse_vec(tokens: &[String], len: usize) -> std::result::Result<Vec<f64>, String> {
    let (count, rest) = tokens.split_first().ok_or("missing length")?;
    let count: usize = count.parse().map_err(|_| format!("bad length `{count}`"))?;
    if count != len || rest.len() != len {
        return Err(format!("expected {len} values, header says {count}, found {}", rest.len()));
    }
    rest.iter()
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number `{t}`")))
        .collect()
}

fn num<T: std::str::FromStr>(it: &mut SplitWhitespace<'_>, what: &str) -> Result<T> {
    it.next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad(format!("missing or invalid {what}")))
}

fn tok<T: std::str::FromStr>(tokens: &[String], i: usize, what: &str) -> Result<T> {
    tokens
        .get(i)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad(format!("missing or invalid {what}")))
}

pub fn load(reader: impl BufRead) -> Result<Network> {
    let mut lines = Lines {
        inner: reader.lines(),
        line_no: 0,
    };
    let header = lines.next_line()?;
    let mut it = header.split_whitespace();
    if it.next() != Some(MAGIC) {
        return Err(bad("missing magic header"));
    }
    let version: u32 = num(&mut it, "version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let t = lines.expect("input")?;
    let input = (tok(&t, 0, "C")?, tok(&t, 1, "H")?, tok(&t, 2, "W")?);
    let t = lines.expect("settings")?;
    let mode: CovMode = t.get(1).ok_or_else(|| bad("missing mode"))?.parse().map_err(bad)?;
    let settings = NormSettings {
        eps: NormEpsilon::new(tok(&t, 0, "eps")?).map_err(|e| bad(e.to_string()))?,
        mode,
        alpha: tok(&t, 2, "alpha")?,
        brn_clip: BrnClip::new(tok(&t, 3, "r_max")?, tok(&t, 4, "d_max")?).map_err(|e| bad(e.to_string()))?,
    };
    let count: usize = tok(&lines.expect("layers")?, 0, "layer count")?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let t = lines.expect("layer")?;
        let kind = t.first().map(String::as_str).unwrap_or("");
        let layer = match kind {
            "conv" | "dense" => {
                let (a, b): (usize, usize) = (tok(&t, 1, "in")?, tok(&t, 2, "out")?);
                let fan_in = if kind == "conv" { a * 9 } else { a };
                let weight = Tensor::new(vec![b, fan_in], lines.expect_vec("weight", b * fan_in)?)?;
                let bias = lines.expect_vec("bias", b)?;
                if kind == "conv" {
                    Layer::Conv3x3(Conv3x3 {
                        in_channels: a,
                        out_channels: b,
                        weight,
                        bias,
                    })
                } else {
                    Layer::Dense(Dense {
                        in_features: a,
                        out_features: b,
                        weight,
                        bias,
                    })
                }
            }
            "relu" => Layer::Relu,
            "avgpool" => Layer::AvgPoolGlobal,
            "norm" => {
                let norm_kind: NormKind = t.get(1).ok_or_else(|| bad("missing norm kind"))?.parse().map_err(bad)?;
                let c: usize = tok(&t, 2, "channels")?;
                let affine = AffineParams {
                    gamma: lines.expect_vec("gamma", c)?,
                    beta: lines.expect_vec("beta", c)?,
                };
                let kt = lines.expect("kalman")?;
                let kalman = if kt.first().map(String::as_str) == Some("none") {
                    None
                } else {
                    let (rows, cols): (usize, usize) = (tok(&kt, 0, "rows")?, tok(&kt, 1, "cols")?);
                    let q_raw = tok(&lines.expect("q_raw")?, 0, "q_raw")?;
                    let g = lines.expect("gain")?;
                    let gain_override = match g.first().map(String::as_str) {
                        Some("free") => None,
                        _ => Some(tok(&g, 0, "gain")?),
                    };
                    Some(KalmanLayerParams {
                        transition: Tensor::new(vec![rows, cols], lines.expect_vec("transition", rows * cols)?)?,
                        q_raw,
                        r_raw: lines.expect_vec("r_raw", rows)?,
                        gain_override,
                    })
                };
                let mu = lines.expect_vec("moving_mu", c)?;
                let st = lines.expect("moving_sigma")?;
                let sigma_mode: CovMode = st.first().ok_or_else(|| bad("missing sigma mode"))?.parse().map_err(bad)?;
                let sigma = match sigma_mode {
                    CovMode::Diag => Covariance::Diag(parse_vec(&st[1..], c).map_err(bad)?),
                    CovMode::Full => Covariance::Full(Tensor::new(vec![c, c], parse_vec(&st[1..], c * c).map_err(bad)?)?),
                };
                let meta = lines.expect("moving_meta")?;
                Layer::Norm(NormLayer {
                    kind: norm_kind,
                    channels: c,
                    affine,
                    moving: MovingStatistics {
                        mu,
                        sigma,
                        alpha: tok(&meta, 0, "alpha")?,
                        updates: tok(&meta, 1, "updates")?,
                    },
                    kalman,
                })
            }
            other => return Err(bad(format!("unknown layer kind `{other}`"))),
        };
        layers.push(layer);
    }
    lines.expect("end")?;
    Ok(Network::new(input, layers, settings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ArchSpec, Mode};

    #[test]
    fn round_trip_is_exact() {
        let arch = ArchSpec {
            widths: vec![3, 4],
            classes: 3,
        };
        let mut net = Network::desk((2, 3, 3), &arch, NormKind::Bkn, NormSettings::default(), 4);
        let x = Tensor::new(vec![2, 2, 3, 3], (0..36).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        let mut buf = Vec::new();
        save(&net, &mut buf).unwrap();
        let back = load(buf.as_slice()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(load("NOT-A-CHECKPOINT 1\n".as_bytes()).is_err());
        let net = Network::desk((1, 2, 2), &ArchSpec { widths: vec![2], classes: 2 }, NormKind::Bn, NormSettings::default(), 1);
        let mut buf = Vec::new();
        save(&net, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(matches!(load(cut.as_bytes()), Err(NetError::Checkpoint(_))));
    }
}
