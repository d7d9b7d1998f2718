use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::arch::BlockKind;
use crate::error::{Error, Result};
use crate::rng::Rng;

const ROW_TOLERANCE: f64 = 1e-9;

/// Scoring constants of the surrogate landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateParams {
    /// Multiplier `a` of the mean log transition probability.
    pub scale: f64,
    /// Shift `b` inside the logistic.
    pub shift: f64,
    pub depth_penalty: f64,
    pub target_depth: f64,
    /// Standard deviation of the cheap-mode pseudo-noise.
    pub noise_amplitude: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            scale: 1.0,
            shift: 3.0,
            depth_penalty: 0.1,
            target_depth: 15.0,
            noise_amplitude: 0.03,
        }
    }
}

/// First-order Markov chain over block kinds. Generates synthetic corpora
/// and defines the surrogate fitness landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TeacherRepr", into = "TeacherRepr")]
pub struct MarkovTeacher {
    kinds: Vec<BlockKind>,
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
    params: SurrogateParams,
}

#[derive(Serialize, Deserialize)]
struct TeacherRepr {
    kinds: Vec<BlockKind>,
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
    #[serde(default)]
    params: SurrogateParams,
}

impl TryFrom<TeacherRepr> for MarkovTeacher {
    type Error = Error;

    fn try_from(r: TeacherRepr) -> Result<Self> {
        MarkovTeacher::new(r.kinds, r.transition, r.initial, r.params)
    }
}

impl From<MarkovTeacher> for TeacherRepr {
    fn from(t: MarkovTeacher) -> Self {
        TeacherRepr {
            kinds: t.kinds,
            transition: t.transition,
            initial: t.initial,
            params: t.params,
        }
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::config(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::config(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn draw(dist: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl MarkovTeacher {
    pub fn new(
        kinds: Vec<BlockKind>,
        transition: Vec<Vec<f64>>,
        initial: Vec<f64>,
        params: SurrogateParams,
    ) -> Result<Self> {
        let n = kinds.len();
        if n == 0 {
            return Err(Error::config("teacher needs at least one kind"));
        }
        let mut seen = kinds.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != n || kinds.contains(&BlockKind::Cell) {
            return Err(Error::config("teacher kinds must be distinct library kinds"));
        }
        if transition.len() != n || transition.iter().any(|r| r.len() != n) || initial.len() != n
        {
            return Err(Error::config(format!("teacher matrix must be {n}x{n}")));
        }
        for (i, row) in transition.iter().enumerate() {
            check_distribution(row, &format!("transition row {i}"))?;
        }
        check_distribution(&initial, "initial distribution")?;
        Ok(MarkovTeacher {
            kinds,
            transition,
            initial,
            params,
        })
    }

    /// Chain in which every kind moves to its successor (cyclically) with
    /// extra mass `primary`, to the kind a third of the way round with extra
    /// mass `secondary`, and spreads the rest uniformly. Uniform start.
    pub fn peaked(kinds: Vec<BlockKind>, primary: f64, secondary: f64) -> Result<Self> {
        let n = kinds.len();
        if n == 0 || primary < 0.0 || secondary < 0.0 || primary + secondary > 1.0 {
            return Err(Error::config("invalid peaked teacher parameters"));
        }
        let base = (1.0 - primary - secondary) / n as f64;
        let offset = (n / 3).max(2) % n.max(1);
        let transition = (0..n)
            .map(|i| {
                let mut row = vec![base; n];
                row[(i + 1) % n] += primary;
                row[(i + offset) % n] += secondary;
                row
            })
            .collect();
        MarkovTeacher::new(
            kinds,
            transition,
            vec![1.0 / n as f64; n],
            SurrogateParams::default(),
        )
    }

    /// The default fifteen-kind teacher.
    pub fn default_library() -> Self {
        MarkovTeacher::peaked(BlockKind::LIBRARY.to_vec(), 0.45, 0.25)
            .expect("valid default teacher")
    }

    /// Every kind transitions with probability 1/n.
    pub fn uniform(kinds: Vec<BlockKind>) -> Result<Self> {
        let n = kinds.len();
        let row = vec![1.0 / n as f64; n];
        MarkovTeacher::new(kinds, vec![row.clone(); n], row, SurrogateParams::default())
    }

    pub fn with_params(mut self, params: SurrogateParams) -> Self {
        self.params = params;
        self
    }

    pub fn kinds(&self) -> &[BlockKind] {
        &self.kinds
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn index_of(&self, kind: BlockKind) -> Option<usize> {
        self.kinds.iter().position(|k| *k == kind)
    }

    pub fn transition_prob(&self, from: BlockKind, to: BlockKind) -> Option<f64> {
        Some(self.transition[self.index_of(from)?][self.index_of(to)?])
    }

    /// Samples a kind sequence of the given length.
    pub fn sample_kinds(&self, depth: usize, rng: &mut Rng) -> Vec<BlockKind> {
        let mut out = Vec::with_capacity(depth);
        if depth == 0 {
            return out;
        }
        let mut cur = draw(&self.initial, rng);
        out.push(self.kinds[cur]);
        for _ in 1..depth {
            cur = draw(&self.transition[cur], rng);
            out.push(self.kinds[cur]);
        }
        out
    }

    /// Visit-weighted mean total-variation distance between the empirical
    /// transition rows of `sequences` and the teacher's rows.
    pub fn bigram_tv<'a>(&self, sequences: impl IntoIterator<Item = &'a [BlockKind]>) -> Result<f64> {
        let n = self.kinds.len();
        let mut counts = vec![vec![0u64; n]; n];
        for seq in sequences {
            for w in seq.windows(2) {
                let (Some(a), Some(b)) = (self.index_of(w[0]), self.index_of(w[1])) else {
                    return Err(Error::config("sequence uses a kind outside the teacher"));
                };
                counts[a][b] += 1;
            }
        }
        let total: u64 = counts.iter().flatten().sum();
        if total == 0 {
            return Err(Error::config("no transitions to compare"));
        }
        let mut tv = 0.0;
        for (row, trow) in counts.iter().zip(&self.transition) {
            let visits: u64 = row.iter().sum();
            if visits == 0 {
                continue;
            }
            let d: f64 = row
                .iter()
                .zip(trow)
                .map(|(c, p)| (*c as f64 / visits as f64 - p).abs())
                .sum::<f64>()
                * 0.5;
            tv += d * visits as f64 / total as f64;
        }
        Ok(tv)
    }
}
