//! Study configuration, read from TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crve::{Method, Reference};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{config_err, Result, SimError};
use crate::layout::Balance;

/// Error covariance used to simulate the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ErrorDesign {
    /// `sigma2 I + tau2 ii'` in every cluster.
    Sv1 { sigma2: f64, tau2: f64 },
    /// `sigma_c^2 = exp(2 delta (C-c)/(C-1))`, `tau_c^2 = rho sigma_c^2`, `c = 1..C`.
    Sv2 {
        rho: f64,
        #[serde(default = "default_delta")]
        delta: f64,
    },
    /// SV1 plus `diag(x_c)^2 / 2`.
    Sv3 { sigma2: f64, tau2: f64 },
}

fn default_delta() -> f64 {
    std::f64::consts::LN_2 / 2.0
}

/// A variance estimator paired with its reference distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StudyMethod {
    /// LZ1 with `t(C-1)` critical values.
    Stata,
    /// LZ2 with Imbens-Kolesar d.f.
    Lzik,
    /// An unbiased estimator with RV0 or RV1 d.f.
    Unbiased(Method, Reference),
    /// True variance with normal critical values; checks the harness itself.
    Oracle,
}

impl StudyMethod {
    pub const STANDARD: [StudyMethod; 8] = [
        StudyMethod::Stata,
        StudyMethod::Lzik,
        StudyMethod::Unbiased(Method::Uv1, Reference::Rv0),
        StudyMethod::Unbiased(Method::Uv1, Reference::Rv1),
        StudyMethod::Unbiased(Method::Uv2, Reference::Rv0),
        StudyMethod::Unbiased(Method::Uv2, Reference::Rv1),
        StudyMethod::Unbiased(Method::Uv3, Reference::Rv0),
        StudyMethod::Unbiased(Method::Uv3, Reference::Rv1),
    ];
}

impl fmt::Display for StudyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StudyMethod::Stata => f.write_str("STATA"),
            StudyMethod::Lzik => f.write_str("LZIK"),
            StudyMethod::Unbiased(m, r) => write!(f, "{m}({r})"),
            StudyMethod::Oracle => f.write_str("ORACLE"),
        }
    }
}

impl FromStr for StudyMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_uppercase();
        let parsed = match norm.as_str() {
            "STATA" => Some(StudyMethod::Stata),
            "LZIK" => Some(StudyMethod::Lzik),
            "ORACLE" => Some(StudyMethod::Oracle),
            _ => norm
                .strip_suffix(')')
                .and_then(|rest| rest.split_once('('))
                .and_then(|(m, r)| {
                    let m: Method = m.parse().ok()?;
                    let r: Reference = r.parse().ok()?;
                    m.is_unbiased().then_some(StudyMethod::Unbiased(m, r))
                }),
        };
        parsed.ok_or_else(|| format!("unknown study method `{s}` (expected STATA, LZIK, ORACLE or UVj(RVi))"))
    }
}

impl Serialize for StudyMethod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StudyMethod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse()
            .map_err(|e: String| de::Error::custom(format!("methods: {e}")))
    }
}

/// Which treated-cluster counts to simulate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Treated {
    /// `1..=C-1`
    #[default]
    Sweep,
    Counts(Vec<usize>),
}

impl Treated {
    pub fn counts(&self, clusters: usize) -> Vec<usize> {
        match self {
            Treated::Sweep => (1..clusters).collect(),
            Treated::Counts(v) => v.clone(),
        }
    }
}

impl Serialize for Treated {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Treated::Sweep => s.serialize_str("sweep"),
            Treated::Counts(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Treated {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Treated;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a count, a list of counts, or \"sweep\"")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Treated, E> {
                usize::try_from(v)
                    .map(|c| Treated::Counts(vec![c]))
                    .map_err(|_| E::custom(format!("treated: negative count {v}")))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Treated, E> {
                Ok(Treated::Counts(vec![v as usize]))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Treated, E> {
                if v.eq_ignore_ascii_case("sweep") {
                    Ok(Treated::Sweep)
                } else {
                    Err(E::custom(format!("treated: expected \"sweep\", got \"{v}\"")))
                }
            }

            fn visit_seq<A: de::SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Treated, A::Error> {
                let mut out = Vec::new();
                while let Some(v) = seq.next_element::<usize>()? {
                    out.push(v);
                }
                Ok(Treated::Counts(out))
            }
        }
        d.deserialize_any(V)
    }
}

/// True coefficients on `(intercept, dummy, continuous)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub clusters: usize,
    pub observations: usize,
    #[serde(default = "default_balance")]
    pub balance: Balance,
    pub design: ErrorDesign,
    #[serde(default)]
    pub treated: Treated,
    #[serde(default)]
    pub coefficients: Coefficients,
    pub replications: usize,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<StudyMethod>,
    /// Redraw the continuous regressor in every replication.
    #[serde(default)]
    pub redraw_x: bool,
    /// Also test the coefficient of the continuous regressor.
    #[serde(default = "default_true")]
    pub test_continuous: bool,
}

fn default_balance() -> Balance {
    Balance::Balanced
}

fn default_levels() -> Vec<f64> {
    vec![0.05]
}

fn default_methods() -> Vec<StudyMethod> {
    StudyMethod::STANDARD.to_vec()
}

fn default_true() -> bool {
    true
}

impl SimulationConfig {
    /// `C = 14`, `n = 2800`, SV1 with `sigma2 = 1`, `tau2 = 0.1`, 200,000 draws,
    /// balanced, all treated counts, all eight standard methods.
    pub fn baseline() -> Self {
        Self {
            clusters: 14,
            observations: 2800,
            balance: Balance::Balanced,
            design: ErrorDesign::Sv1 { sigma2: 1.0, tau2: 0.1 },
            treated: Treated::Sweep,
            coefficients: Coefficients::default(),
            replications: 200_000,
            levels: default_levels(),
            seed: 0,
            methods: default_methods(),
            redraw_x: false,
            test_continuous: true,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.clusters;
        if c < 2 {
            return Err(config_err("clusters", format!("need at least 2 clusters, got {c}")));
        }
        if self.observations < c {
            return Err(config_err(
                "observations",
                format!("{} observations for {c} clusters", self.observations),
            ));
        }
        for t in self.treated.counts(c) {
            if t < 1 || t >= c {
                return Err(config_err("treated", format!("count {t} outside 1..={}", c - 1)));
            }
        }
        if let Treated::Counts(v) = &self.treated {
            if v.is_empty() {
                return Err(config_err("treated", "empty list"));
            }
        }
        if self.levels.is_empty() {
            return Err(config_err("levels", "empty list"));
        }
        if let Some(l) = self.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return Err(config_err("levels", format!("{l} is not in (0, 1)")));
        }
        if self.methods.is_empty() {
            return Err(config_err("methods", "no methods selected"));
        }
        match self.design {
            ErrorDesign::Sv1 { sigma2, tau2 } | ErrorDesign::Sv3 { sigma2, tau2 } => {
                if !(sigma2 > 0.0) {
                    return Err(config_err("design.sigma2", format!("{sigma2} must be positive")));
                }
                if !(tau2 >= 0.0) {
                    return Err(config_err("design.tau2", format!("{tau2} must be nonnegative")));
                }
            }
            ErrorDesign::Sv2 { rho, delta } => {
                if !(rho >= 0.0) {
                    return Err(config_err("design.rho", format!("{rho} must be nonnegative")));
                }
                if !delta.is_finite() {
                    return Err(config_err("design.delta", "must be finite"));
                }
            }
        }
        if let Balance::Unbalanced { gamma } = self.balance {
            if !gamma.is_finite() {
                return Err(config_err("balance.gamma", "must be finite"));
            }
        }
        crate::layout::cluster_sizes(c, self.observations, self.balance)?;
        Ok(())
    }
}
