use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MptError, Result};

/// A bijection on `{0..N-1}`. Entry `k` names the inner-pass layer whose
/// feature is added to outer-pass layer `k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(values: Vec<usize>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(MptError::Config("empty permutation".into()));
        }
        let mut seen = vec![0usize; n];
        let mut out_of_range = Vec::new();
        for &v in &values {
            if v >= n {
                out_of_range.push(v);
            } else {
                seen[v] += 1;
            }
        }
        let duplicates: Vec<usize> = (0..n).filter(|&i| seen[i] > 1).collect();
        if !out_of_range.is_empty() || !duplicates.is_empty() {
            return Err(MptError::Config(format!(
                "{values:?} is not a permutation of 0..{n}: duplicates {duplicates:?}, out of range {out_of_range:?}"
            )));
        }
        Ok(Permutation(values))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Number of positions where the two permutations disagree.
    pub fn hamming(&self, other: &Permutation) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// Comma-separated form used on the command line, e.g. `0,4,1,5,2,3`.
    pub fn to_cli(&self) -> String {
        self.0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = MptError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Bracketed form, e.g. `[0,4,1,5,2,3]`.
impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.to_cli())
    }
}

/// Accepts both `[0,4,1]` and `0,4,1`.
impl FromStr for Permutation {
    type Err = MptError;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim();
        let body = body
            .strip_prefix('[')
            .and_then(|b| b.strip_suffix(']'))
            .unwrap_or(body);
        let values = body
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| MptError::Config(format!("bad permutation entry {t:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Permutation::new(values)
    }
}

/// How outer-pass layers receive features from the previous pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConnectionSpec {
    /// Single pass; plain transformer encoder.
    None,
    /// Passes composed back to back, no cross connections, no re-fed input.
    Chained,
    Hard { perm: Permutation },
    /// Learned `N x N` logits; `init_logits` defaults to all zeros.
    Soft {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init_logits: Option<Vec<Vec<f64>>>,
    },
}

impl ConnectionSpec {
    pub fn soft() -> Self {
        ConnectionSpec::Soft { init_logits: None }
    }

    pub fn hard(perm: &[usize]) -> Result<Self> {
        Ok(ConnectionSpec::Hard {
            perm: Permutation::new(perm.to_vec())?,
        })
    }

    pub fn label(&self) -> String {
        match self {
            ConnectionSpec::None => "none".into(),
            ConnectionSpec::Chained => "chained".into(),
            ConnectionSpec::Hard { perm } => format!("hard {perm}"),
            ConnectionSpec::Soft { .. } => "soft".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tap {
    /// Post-FFN output of the inner layer.
    ModuleOutput,
    /// Post-self-attention intermediate of the inner layer.
    AttentionOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Inject {
    /// Added to the outer layer's input, upstream of its first residual split.
    PreResidual,
    /// Added after the self-attention sublayer's residual and norm.
    PostResidual,
}

/// Where an infusion is read from and where it is added. Serialized as the
/// letters `a`..`d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RoutingPattern {
    pub tap: Tap,
    pub inject: Inject,
}

impl RoutingPattern {
    pub const A: Self = Self {
        tap: Tap::ModuleOutput,
        inject: Inject::PreResidual,
    };
    pub const B: Self = Self {
        tap: Tap::ModuleOutput,
        inject: Inject::PostResidual,
    };
    pub const C: Self = Self {
        tap: Tap::AttentionOutput,
        inject: Inject::PreResidual,
    };
    pub const D: Self = Self {
        tap: Tap::AttentionOutput,
        inject: Inject::PostResidual,
    };

    pub const ALL: [Self; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn letter(&self) -> char {
        match (self.tap, self.inject) {
            (Tap::ModuleOutput, Inject::PreResidual) => 'a',
            (Tap::ModuleOutput, Inject::PostResidual) => 'b',
            (Tap::AttentionOutput, Inject::PreResidual) => 'c',
            (Tap::AttentionOutput, Inject::PostResidual) => 'd',
        }
    }
}

impl Default for RoutingPattern {
    fn default() -> Self {
        Self::A
    }
}

impl FromStr for RoutingPattern {
    type Err = MptError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            other => Err(MptError::Config(format!("unknown routing pattern {other:?}"))),
        }
    }
}

impl TryFrom<String> for RoutingPattern {
    type Error = MptError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RoutingPattern> for String {
    fn from(r: RoutingPattern) -> Self {
        r.letter().to_string()
    }
}

/// Which encoder outputs feed the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Loss on the last pass only.
    #[default]
    FinalPass,
    /// Sum of the losses decoded from every pass.
    SumAllPasses,
    /// One pass drawn uniformly per step.
    RandomPass,
}

/// Which pass output the decoder reads at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FirstPass,
    #[default]
    FinalPass,
}

impl FromStr for Regime {
    type Err = MptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "first_pass" => Ok(Regime::FirstPass),
            "final" | "final_pass" => Ok(Regime::FinalPass),
            other => Err(MptError::Config(format!("unknown regime {other:?}"))),
        }
    }
}

fn default_dropout() -> f64 {
    0.1
}

fn default_passes() -> usize {
    2
}

/// Full architecture description. The decoder has as many layers as the
/// encoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MptConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Encoder layers per pass (N).
    pub layers: usize,
    /// Number of passes (P).
    #[serde(default = "default_passes")]
    pub passes: usize,
    pub vocab: usize,
    pub max_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub connection: ConnectionSpec,
    #[serde(default)]
    pub routing: RoutingPattern,
    #[serde(default)]
    pub loss_mode: LossMode,
}

impl MptConfig {
    /// Small model used by gradient checks and unit tests.
    pub fn tiny(connection: ConnectionSpec, routing: RoutingPattern) -> Self {
        let passes = if connection == ConnectionSpec::None { 1 } else { 2 };
        MptConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 3,
            passes,
            vocab: 11,
            max_len: 5,
            dropout: 0.0,
            connection,
            routing,
            loss_mode: LossMode::FinalPass,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d_model", self.d_model),
            ("model.heads", self.heads),
            ("model.d_ff", self.d_ff),
            ("model.layers", self.layers),
            ("model.passes", self.passes),
            ("model.vocab", self.vocab),
            ("model.max_len", self.max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(MptError::schema(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(MptError::schema(
                "model.heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MptError::schema("model.dropout", "must lie in [0, 1)"));
        }
        match &self.connection {
            ConnectionSpec::None if self.passes != 1 => {
                return Err(MptError::Config(format!(
                    "connection none runs a single pass, got passes = {}",
                    self.passes
                )));
            }
            ConnectionSpec::Chained | ConnectionSpec::Hard { .. } | ConnectionSpec::Soft { .. }
                if self.passes < 2 =>
            {
                return Err(MptError::Config(format!(
                    "connection {} needs at least 2 passes, got {}",
                    self.connection.label(),
                    self.passes
                )));
            }
            ConnectionSpec::Hard { perm } if perm.len() != self.layers => {
                return Err(MptError::Config(format!(
                    "permutation {perm} has {} entries for {} layers",
                    perm.len(),
                    self.layers
                )));
            }
            ConnectionSpec::Soft {
                init_logits: Some(rows),
            } if rows.len() != self.layers || rows.iter().any(|r| r.len() != self.layers) => {
                return Err(MptError::Config(format!(
                    "soft logits must be {0}x{0}",
                    self.layers
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_parsing_and_display() {
        let p: Permutation = "[0,4,1,5,2,3]".parse().unwrap();
        assert_eq!(p.to_string(), "[0,4,1,5,2,3]");
        assert_eq!(p.to_cli(), "0,4,1,5,2,3");
        assert_eq!("0,4,1,5,2,3".parse::<Permutation>().unwrap(), p);
        let err = Permutation::new(vec![0, 1, 1]).unwrap_err().to_string();
        assert!(err.contains("duplicates [1]"), "{err}");
        assert!(Permutation::new(vec![0, 3]).is_err());
    }

    #[test]
    fn routing_letters() {
        for (r, l) in RoutingPattern::ALL.iter().zip(['a', 'b', 'c', 'd']) {
            assert_eq!(r.letter(), l);
            assert_eq!(l.to_string().parse::<RoutingPattern>().unwrap(), *r);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = MptConfig::tiny(ConnectionSpec::soft(), RoutingPattern::A);
        cfg.validate().unwrap();
        cfg.passes = 1;
        assert!(matches!(cfg.validate(), Err(MptError::Config(_))));
        cfg.passes = 2;
        cfg.connection = ConnectionSpec::hard(&[0, 1]).unwrap();
        assert!(cfg.validate().is_err());
        cfg.connection = ConnectionSpec::None;
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(MptError::Schema { .. })));
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok = r#"{"d_model":8,"heads":2,"d_ff":16,"layers":3,"vocab":11,"max_len":5,
            "connection":{"kind":"hard","perm":[2,0,1]},"routing":"c"}"#;
        let cfg: MptConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.routing, RoutingPattern::C);
        assert_eq!(cfg.passes, 2);
        let bad = ok.replace("\"routing\"", "\"routng\"");
        let err = serde_json::from_str::<MptConfig>(&bad).unwrap_err().to_string();
        assert!(err.contains("routng"), "{err}");
        let dup = ok.replace("[2,0,1]", "[2,2,1]");
        assert!(serde_json::from_str::<MptConfig>(&dup).is_err());
    }
}
