//! Patch saliency and token selection.
//!
//! The default saliency is the student's last-block class attention averaged
//! over heads. A [`KeepSet`] lists the patches handed to the teacher; all
//! other patches are dropped from its input sequence.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::vit::ForwardRecord;

/// Where a saliency vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    StudentMeanAttention,
    TokenToken,
    External,
    Interpolated,
}

/// Non-negative per-patch importance over a square grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyScores {
    values: Vec<f64>,
    grid_side: usize,
    source: ScoreSource,
}

impl SaliencyScores {
    pub fn new(values: Vec<f64>, source: ScoreSource) -> Result<Self> {
        let side = (values.len() as f64).sqrt().round() as usize;
        if values.is_empty() || side * side != values.len() {
            return Err(Error::param(format!(
                "{} scores do not form a square grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::param(format!("saliency score {v} is not a finite non-negative value")));
        }
        Ok(Self {
            values,
            grid_side: side,
            source,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn source(&self) -> ScoreSource {
        self.source
    }
}

/// Rule used to turn scores into a keep set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MaskPolicy {
    /// Keep the k highest-scoring patches.
    TopK,
    /// Keep the k lowest-scoring patches.
    MinK,
    /// Keep k patches uniformly at random.
    Random { seed: u64 },
    /// Top-k over head-averaged patch-to-patch attention.
    TokenToken,
    /// Top-k over the class attention of a separate scoring model.
    External { scorer: String },
}

impl MaskPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            MaskPolicy::TopK => "top-k",
            MaskPolicy::MinK => "min-k",
            MaskPolicy::Random { .. } => "random",
            MaskPolicy::TokenToken => "token-token",
            MaskPolicy::External { .. } => "external",
        }
    }

    /// Whether selection needs a saliency vector at all.
    pub fn uses_scores(&self) -> bool {
        !matches!(self, MaskPolicy::Random { .. })
    }
}

/// Command-line form: `top-k`, `min-k`, `random[:SEED]`, `token-token` or
/// `external:NAME`.
impl std::str::FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        match (head, arg) {
            ("top-k", None) => Ok(MaskPolicy::TopK),
            ("min-k", None) => Ok(MaskPolicy::MinK),
            ("token-token", None) => Ok(MaskPolicy::TokenToken),
            ("random", None) => Ok(MaskPolicy::Random { seed: 0 }),
            ("random", Some(seed)) => seed
                .parse()
                .map(|seed| MaskPolicy::Random { seed })
                .map_err(|_| Error::param(format!("bad random seed {seed:?}"))),
            ("external", Some(name)) if !name.is_empty() => Ok(MaskPolicy::External {
                scorer: name.to_string(),
            }),
            _ => Err(Error::param(format!(
                "unknown policy {s:?}; expected top-k, min-k, random[:SEED], token-token or external:NAME"
            ))),
        }
    }
}

/// Strictly increasing patch indices drawn from `0..universe`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KeepSet {
    indices: Vec<usize>,
    universe: usize,
}

impl KeepSet {
    pub fn new(mut indices: Vec<usize>, universe: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::param("keep set must contain at least one patch"));
        }
        indices.sort_unstable();
        for w in indices.windows(2) {
            if w[0] == w[1] {
                return Err(Error::param(format!("duplicate patch index {}", w[0])));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= universe {
                return Err(Error::Index {
                    op: "keep set",
                    index: last,
                    len: universe,
                });
            }
        }
        Ok(Self { indices, universe })
    }

    pub fn all(universe: usize) -> Self {
        Self {
            indices: (0..universe).collect(),
            universe,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// k
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// N, the number of patches the indices refer to.
    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.universe
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Patches not in the set.
    pub fn complement(&self) -> Vec<usize> {
        (0..self.universe).filter(|&i| !self.contains(i)).collect()
    }
}

/// Head-averaged class attention of example `b` of a record.
pub fn mean_class_attention<T: Real>(record: &ForwardRecord<T>, b: usize) -> Result<SaliencyScores> {
    let att = record
        .class_attention
        .as_ref()
        .ok_or_else(|| Error::State("forward record has no class attention".into()))?;
    let &[batch, heads, n] = att.shape() else {
        return Err(Error::shape("mean_class_attention", att.shape(), &[0, 0, 0]));
    };
    if heads == 0 {
        return Err(Error::State("class attention has no heads".into()));
    }
    if b >= batch {
        return Err(Error::Index {
            op: "mean_class_attention",
            index: b,
            len: batch,
        });
    }
    let data = &att.data()[b * heads * n..(b + 1) * heads * n];
    SaliencyScores::new(head_mean(data, heads, n), ScoreSource::StudentMeanAttention)
}

pub(crate) fn head_mean<T: Real>(per_head: &[T], heads: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for h in 0..heads {
        for (o, v) in out.iter_mut().zip(&per_head[h * n..(h + 1) * n]) {
            *o += v.as_f64();
        }
    }
    let inv = 1.0 / heads as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Mean attention each patch receives from all patch queries (class token
/// excluded), averaged over heads.
pub fn token_token_scores<T: Real>(record: &ForwardRecord<T>, b: usize) -> Result<SaliencyScores> {
    let att = record
        .patch_attention
        .as_ref()
        .ok_or_else(|| Error::State("forward record has no patch attention".into()))?;
    let &[batch, n, _] = att.shape() else {
        return Err(Error::shape("token_token_scores", att.shape(), &[0, 0, 0]));
    };
    if b >= batch {
        return Err(Error::Index {
            op: "token_token_scores",
            index: b,
            len: batch,
        });
    }
    SaliencyScores::new(
        column_means(&att.data()[b * n * n..(b + 1) * n * n], n),
        ScoreSource::TokenToken,
    )
}

pub(crate) fn column_means<T: Real>(matrix: &[T], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in matrix.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v.as_f64();
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Descending score, lower index first among equals.
fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

fn by_score_asc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// Chooses `k` patches under `policy`. Score-driven policies keep the
/// highest (or for [`MaskPolicy::MinK`], lowest) scores, ties going to the
/// lower patch index. The result is always sorted ascending.
pub fn select_keep(scores: &SaliencyScores, k: usize, policy: &MaskPolicy) -> Result<KeepSet> {
    select_keep_with_stream(scores, k, policy, 0)
}

/// As [`select_keep`]; `stream` decorrelates [`MaskPolicy::Random`] draws
/// (e.g. per step and per example) while keeping them seeded.
pub fn select_keep_with_stream(
    scores: &SaliencyScores,
    k: usize,
    policy: &MaskPolicy,
    stream: u64,
) -> Result<KeepSet> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::param(format!("keep count {k} outside 1..={n}")));
    }
    if k == n {
        return Ok(KeepSet::all(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let chosen = match policy {
        MaskPolicy::TopK | MaskPolicy::TokenToken | MaskPolicy::External { .. } => {
            order.sort_by(by_score_desc(scores.values()));
            order[..k].to_vec()
        }
        MaskPolicy::MinK => {
            order.sort_by(by_score_asc(scores.values()));
            order[..k].to_vec()
        }
        MaskPolicy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(stream);
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        }
    };
    KeepSet::new(chosen, n)
}

/// Resolves a random keep set without needing scores.
pub fn random_keep(n: usize, k: usize, seed: u64, stream: u64) -> Result<KeepSet> {
    let uniform = SaliencyScores::new(vec![0.0; n], ScoreSource::External)?;
    select_keep_with_stream(&uniform, k, &MaskPolicy::Random { seed }, stream)
}

/// Gathers the kept token rows (`N × d` → `k × d`).
pub fn build_masked_input<T: Real>(tokens: &Tensor<T>, keep: &KeepSet) -> Result<Tensor<T>> {
    let n = tokens.shape().first().copied().unwrap_or(0);
    if keep.universe() != n {
        return Err(Error::param(format!(
            "keep set built for {} patches, tokens have {n}",
            keep.universe()
        )));
    }
    let mut tape = Tape::new();
    let v = tape.constant(tokens.clone());
    let out = tape.gather_rows(v, keep.indices())?;
    Ok(tape.value(out).clone())
}

/// Tape-recorded variant used during training.
pub fn mask_on_tape<T: Real>(tape: &mut Tape<T>, tokens: Var, keep: &KeepSet) -> Result<Var> {
    if keep.universe() != tape.shape(tokens)[0] {
        return Err(Error::param("keep set does not match the token count"));
    }
    tape.gather_rows(tokens, keep.indices())
}

/// Fraction of ground-truth salient patches captured by `keep`.
pub fn recovery_rate(keep: &KeepSet, salient: &[usize]) -> f64 {
    if salient.is_empty() {
        return 0.0;
    }
    let hits = salient.iter().filter(|&&i| keep.contains(i)).count();
    hits as f64 / salient.len() as f64
}
