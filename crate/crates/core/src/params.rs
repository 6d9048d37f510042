//! Trainable weights, their initialization, and the checkpoint format.
//!
//! Every tensor lives in one flat [`ParamStore`]; [`Weights`] is a typed
//! view over it. `Weights<usize>` indexes the store, and the same layout
//! mapped to `Weights<Var>` addresses the leaves of a tape.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{func, Tensor};
use crate::config::{AttentionMode, Interaction, ModelConfig};
use crate::error::{ensure, Error, Result};
use crate::events::write_text;

/// Two-layer perceptron: `w2 relu(w1 x + b1) + b2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Weights of the embedding recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyrepWeights<T> {
    /// `[dim, r * dim]`, acting on per-edge-type aggregates stacked end to end.
    pub w_s: T,
    pub w_r: T,
    pub w_t: T,
    pub w_h: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityWeights<T> {
    /// Unconstrained rates; the effective rate is `softplus(psi_raw[k])`.
    pub psi_raw: T,
    /// Per event kind: `omega_k` (`[2 dim]`) for concat, `Omega_k`
    /// (`[dim, dim]`) for bilinear.
    pub compat: [T; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderWeights<T> {
    pub node1: Mlp<T>,
    pub edge1: Mlp<T>,
    pub node2: Mlp<T>,
    pub edge2: Mlp<T>,
    /// `[dim, dim, dim]` bilinear tensors of the two passes.
    pub bilinear1: T,
    pub bilinear2: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights<T> {
    pub dyrep: DyrepWeights<T>,
    pub intensity: IntensityWeights<T>,
    pub encoder: Option<EncoderWeights<T>>,
}

impl<T: Copy> Mlp<T> {
    fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> Mlp<U> {
        Mlp {
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

impl<T: Copy> Weights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Weights<U> {
        let d = &self.dyrep;
        let i = &self.intensity;
        Weights {
            dyrep: DyrepWeights {
                w_s: f(d.w_s),
                w_r: f(d.w_r),
                w_t: f(d.w_t),
                w_h: f(d.w_h),
            },
            intensity: IntensityWeights {
                psi_raw: f(i.psi_raw),
                compat: [f(i.compat[0]), f(i.compat[1])],
            },
            encoder: self.encoder.as_ref().map(|e| EncoderWeights {
                node1: e.node1.map(&mut f),
                edge1: e.edge1.map(&mut f),
                node2: e.node2.map(&mut f),
                edge2: e.edge2.map(&mut f),
                bilinear1: f(e.bilinear1),
                bilinear2: f(e.bilinear2),
            }),
        }
    }
}

/// Named tensors plus the typed layout that indexes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Weights<usize>,
    /// Divisor applied to waiting times before they enter the update.
    pub time_scale: f64,
}

/// Initial effective rate `psi_k`.
pub const INITIAL_PSI: f64 = 0.5;

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data))
    }

    /// Glorot-uniform `[out, in]` matrix.
    fn glorot(&mut self, name: &str, out: usize, inp: usize) -> usize {
        let bound = (6.0 / (out + inp) as f64).sqrt();
        self.uniform(name, &[out, inp], bound)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    fn mlp(&mut self, name: &str, inp: usize, hidden: usize, out: usize) -> Mlp<usize> {
        Mlp {
            w1: self.glorot(&format!("{name}.w1"), hidden, inp),
            b1: self.zeros(&format!("{name}.b1"), &[hidden]),
            w2: self.glorot(&format!("{name}.w2"), out, hidden),
            b2: self.zeros(&format!("{name}.b2"), &[out]),
        }
    }
}

impl ParamStore {
    /// Fresh weights for `cfg`, drawn from `rng`.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let r = cfg.relation_count();
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        };
        let dyrep = DyrepWeights {
            w_s: b.glorot("dyrep.w_s", d, r * d),
            w_r: b.glorot("dyrep.w_r", d, d),
            w_t: b.uniform("dyrep.w_t", &[d], (6.0 / (d + 1) as f64).sqrt()),
            w_h: b.glorot("dyrep.w_h", d, d),
        };
        let psi_raw = (INITIAL_PSI.exp() - 1.0).ln();
        let psi = b.push("intensity.psi_raw", Tensor::vector(vec![psi_raw; 2]));
        let compat = match cfg.interaction {
            Interaction::Concat => {
                let bound = (6.0 / (2 * d + 1) as f64).sqrt();
                [
                    b.uniform("intensity.omega.0", &[2 * d], bound),
                    b.uniform("intensity.omega.1", &[2 * d], bound),
                ]
            }
            Interaction::Bilinear => [
                b.glorot("intensity.omega_bilinear.0", d, d),
                b.glorot("intensity.omega_bilinear.1", d, d),
            ],
        };
        let encoder = (cfg.attention == AttentionMode::LdgLearned).then(|| {
            let out = cfg.prior_config().categories();
            let bound = 1.0 / d as f64;
            EncoderWeights {
                node1: b.mlp("encoder.node1", d, d, d),
                bilinear1: b.uniform("encoder.bilinear1", &[d, d, d], bound),
                edge1: b.mlp("encoder.edge1", d, d, d),
                node2: b.mlp("encoder.node2", d, d, d),
                bilinear2: b.uniform("encoder.bilinear2", &[d, d, d], bound),
                edge2: b.mlp("encoder.edge2", d, d, out),
            }
        });
        ParamStore {
            names: b.names,
            tensors: b.tensors,
            layout: Weights {
                dyrep,
                intensity: IntensityWeights {
                    psi_raw: psi,
                    compat,
                },
                encoder,
            },
            time_scale: 1.0,
        }
    }

    pub fn layout(&self) -> &Weights<usize> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    /// Number of scalar weights.
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Effective positive rates `psi_k`.
    pub fn psi(&self) -> [f64; 2] {
        let raw = self.tensor(self.layout.intensity.psi_raw).data();
        [func::softplus(raw[0]), func::softplus(raw[1])]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Finite, and neither rate has underflowed to zero.
    pub fn is_usable(&self) -> bool {
        self.is_finite() && self.psi().iter().all(|&p| p > 0.0)
    }

    /// Text checkpoint. Values use Rust's shortest round-trip formatting, so
    /// loading restores every bit.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "ldg-checkpoint {CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "time_scale {:?}", self.time_scale).unwrap();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "tensor {name} [{}]", shape.join(",")).unwrap();
            let values: Vec<String> = t.data().iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{}", values.join(" ")).unwrap();
        }
        out
    }

    /// Loads values from a checkpoint into a store whose layout was built
    /// for the same configuration.
    pub fn load_checkpoint_into(&mut self, text: &str) -> Result<()> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        ensure!(
            header == format!("ldg-checkpoint {CHECKPOINT_VERSION}"),
            Checkpoint,
            "unsupported checkpoint header {header:?}"
        );
        let ts = lines
            .next()
            .and_then(|l| l.strip_prefix("time_scale "))
            .ok_or_else(|| Error::Checkpoint("missing time_scale line".into()))?;
        self.time_scale = parse_f64(ts)?;
        let mut seen = vec![false; self.tensors.len()];
        while let Some(line) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let rest = line
                .strip_prefix("tensor ")
                .ok_or_else(|| Error::Checkpoint(format!("unexpected line {line:?}")))?;
            let (name, shape) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor line {line:?}")))?;
            let shape: Vec<usize> = shape
                .trim_matches(|c| c == '[' || c == ']')
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?;
            let values: Vec<f64> = lines
                .next()
                .unwrap_or_default()
                .split_whitespace()
                .map(parse_f64)
                .collect::<Result<_>>()?;
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            ensure!(
                self.tensors[idx].shape() == shape.as_slice() && values.len() == self.tensors[idx].len(),
                Checkpoint,
                "tensor {name} has shape {shape:?}, expected {:?}",
                self.tensors[idx].shape()
            );
            self.tensors[idx] = Tensor::new(shape, values);
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing tensor {}", self.names[i])));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_checkpoint())
    }

    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut store = ParamStore::init(cfg, &mut rng);
        store.load_checkpoint_into(&text)?;
        Ok(store)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad number {s:?}")))
}
