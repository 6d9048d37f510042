//! Model and training configuration.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::GumbelConfig;
use crate::error::{ensure, Error, Result};

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {:?}; expected one of: {}",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(
    /// Where the temporal attention `S` comes from.
    AttentionMode {
        DyRep => "dyrep",
        LdgLearned => "ldg-learned",
        LdgRandom => "ldg-random",
    }
);

string_enum!(
    PriorKind {
        Uniform => "uniform",
        Sparse => "sparse",
    }
);

string_enum!(
    /// How a pair of embeddings is scored inside the intensity.
    Interaction {
        Concat => "concat",
        Bilinear => "bilinear",
    }
);

string_enum!(
    /// Reduction over attention-weighted neighbor messages.
    Aggregator {
        Sum => "sum",
        Max => "max",
    }
);

string_enum!(
    /// Output nonlinearity of the embedding update.
    Activation {
        Tanh => "tanh",
        Sigmoid => "sigmoid",
    }
);

string_enum!(
    /// Initial node embeddings.
    EmbeddingInit {
        Zero => "zero",
        Random => "random",
    }
);

/// Prior `p(S)` over edge types. The sparse prior has an extra leading
/// "non-edge" category whose samples are discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub theta: Vec<f64>,
}

/// Probability mass on the non-edge category of the sparse prior.
pub const SPARSE_NON_EDGE_MASS: f64 = 0.9;
const SPARSE_EDGE_MASS: f64 = 0.1;

impl PriorConfig {
    pub fn uniform(r: usize) -> Self {
        PriorConfig {
            kind: PriorKind::Uniform,
            theta: vec![1.0 / r as f64; r],
        }
    }

    /// `[0.90, 0.05, 0.05]` for `r = 2`; the edge mass is split evenly.
    pub fn sparse(r: usize) -> Self {
        let mut theta = vec![SPARSE_EDGE_MASS / r as f64; r + 1];
        theta[0] = SPARSE_NON_EDGE_MASS;
        PriorConfig {
            kind: PriorKind::Sparse,
            theta,
        }
    }

    pub fn new(kind: PriorKind, r: usize) -> Self {
        match kind {
            PriorKind::Uniform => Self::uniform(r),
            PriorKind::Sparse => Self::sparse(r),
        }
    }

    /// Number of categories the encoder must output.
    pub fn categories(&self) -> usize {
        self.theta.len()
    }

    /// Number of usable edge types.
    pub fn edge_types(&self) -> usize {
        match self.kind {
            PriorKind::Uniform => self.theta.len(),
            PriorKind::Sparse => self.theta.len() - 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.theta.iter().sum();
        ensure!(
            (total - 1.0).abs() < 1e-9 && self.theta.iter().all(|&p| p > 0.0),
            Config,
            "prior {:?} is not a strictly positive probability vector",
            self.theta
        );
        Ok(())
    }
}

/// Architecture of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_nodes: usize,
    /// Embedding width, also the hidden width of every encoder layer.
    pub dim: usize,
    /// Number of edge types. DyRep mode always uses one.
    pub edge_types: usize,
    pub attention: AttentionMode,
    pub prior: PriorKind,
    pub interaction: Interaction,
    pub aggregator: Aggregator,
    pub activation: Activation,
    pub embedding_init: EmbeddingInit,
    pub gumbel: GumbelConfig,
    /// Upper clamp on the scaled waiting time.
    pub max_time_shift: f64,
}

impl ModelConfig {
    pub fn new(n_nodes: usize) -> Self {
        ModelConfig {
            n_nodes,
            dim: 32,
            edge_types: 2,
            attention: AttentionMode::LdgLearned,
            prior: PriorKind::Sparse,
            interaction: Interaction::Bilinear,
            aggregator: Aggregator::Sum,
            activation: Activation::Tanh,
            embedding_init: EmbeddingInit::Zero,
            gumbel: GumbelConfig::default(),
            max_time_shift: 100.0,
        }
    }

    /// Edge types actually in use (one for DyRep).
    pub fn relation_count(&self) -> usize {
        match self.attention {
            AttentionMode::DyRep => 1,
            _ => self.edge_types,
        }
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig::new(self.prior, self.edge_types)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_nodes >= 2, Config, "need at least two nodes, got {}", self.n_nodes);
        ensure!(self.dim >= 1, Config, "dim must be positive");
        ensure!(self.edge_types >= 1, Config, "edge_types must be positive");
        ensure!(
            self.max_time_shift > 0.0,
            Config,
            "max_time_shift must be positive"
        );
        self.gumbel
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.prior_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_prior_matches_reference_values() {
        let p = PriorConfig::sparse(2);
        assert_eq!(p.theta, vec![0.9, 0.05, 0.05]);
        assert_eq!(p.categories(), 3);
        assert_eq!(p.edge_types(), 2);
        p.validate().unwrap();
    }

    #[test]
    fn uniform_prior() {
        let p = PriorConfig::uniform(4);
        assert_eq!(p.theta, vec![0.25; 4]);
        assert_eq!(p.edge_types(), 4);
    }

    #[test]
    fn enums_round_trip_through_strings() {
        for m in AttentionMode::ALL {
            assert_eq!(m.as_str().parse::<AttentionMode>().unwrap(), *m);
        }
        assert!("ldg".parse::<AttentionMode>().is_err());
        assert_eq!("bilinear".parse::<Interaction>().unwrap(), Interaction::Bilinear);
    }
}
