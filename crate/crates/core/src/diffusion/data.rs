//! Synthetic concept grids.
//!
//! Each of the eight concepts owns a +-1 pattern over half of the 8x8x2 grid
//! (a distinct non-constant Walsh-Hadamard row, so patterns are mutually
//! orthogonal and zero-mean). A single-concept grid repeats the pattern in
//! both halves; a two-concept prompt `[a, b]` puts `a` in the top half and `b`
//! in the bottom half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const GRID_SIDE: usize = 8;
pub const TOKENS: usize = GRID_SIDE * GRID_SIDE;
pub const HALF_TOKENS: usize = TOKENS / 2;
pub const CHANNELS: usize = 2;
pub const NUM_CONCEPTS: usize = 8;
pub const MAX_PROMPT: usize = 2;

const WALSH_ROWS: [usize; NUM_CONCEPTS] = [3, 5, 9, 17, 33, 6, 24, 40];

/// Region of the grid a concept occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Full,
    Top,
    Bottom,
}

impl Region {
    pub fn tokens(self) -> std::ops::Range<usize> {
        match self {
            Region::Full => 0..TOKENS,
            Region::Top => 0..HALF_TOKENS,
            Region::Bottom => HALF_TOKENS..TOKENS,
        }
    }

    /// Regions assigned to the concepts of a prompt of length `n`.
    pub fn layout(n: usize) -> &'static [Region] {
        match n {
            1 => &[Region::Full],
            _ => &[Region::Top, Region::Bottom],
        }
    }
}

/// `+-1` value of concept `c` at a half-grid token and channel.
fn half_value(c: usize, token: usize, channel: usize) -> f64 {
    let e = (token % HALF_TOKENS) * CHANNELS + channel;
    if (WALSH_ROWS[c] & e).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt(Vec<usize>);

impl Prompt {
    pub fn new(concepts: Vec<usize>) -> Result<Self> {
        if concepts.is_empty() || concepts.len() > MAX_PROMPT {
            return Err(Error::domain("Prompt", format!("prompts hold 1..={MAX_PROMPT} concepts")));
        }
        if let Some(c) = concepts.iter().find(|&&c| c >= NUM_CONCEPTS) {
            return Err(Error::domain("Prompt", format!("unknown concept {c}")));
        }
        if concepts.len() == 2 && concepts[0] == concepts[1] {
            return Err(Error::domain("Prompt", "concepts in a prompt must differ"));
        }
        Ok(Prompt(concepts))
    }

    pub fn concepts(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Concepts paired with the grid region each one should occupy.
    pub fn placements(&self) -> impl Iterator<Item = (usize, Region)> + '_ {
        self.0.iter().copied().zip(Region::layout(self.0.len()).iter().copied())
    }
}

impl std::str::FromStr for Prompt {
    type Err = Error;

    /// Parses `"3"` or `"3+5"`.
    fn from_str(s: &str) -> Result<Self> {
        let ids = s
            .split('+')
            .map(|p| p.trim().parse::<usize>().map_err(|e| Error::Parse(format!("prompt `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Prompt::new(ids)
    }
}

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

/// Template grid (`TOKENS x CHANNELS`) of concept `c` repeated over the whole grid.
pub fn concept_template(c: usize) -> Matrix {
    Matrix::from_fn(TOKENS, CHANNELS, |tok, ch| half_value(c, tok, ch))
}

/// Clean grid for a prompt.
pub fn render(prompt: &Prompt) -> Matrix {
    let mut grid = Matrix::zeros(TOKENS, CHANNELS);
    for (c, region) in prompt.placements() {
        for tok in region.tokens() {
            for ch in 0..CHANNELS {
                grid.set(tok, ch, half_value(c, tok, ch));
            }
        }
    }
    grid
}

/// Pearson correlation of the grid with concept `c`'s template over `region`.
pub fn template_correlation(grid: &Matrix, c: usize, region: Region) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for tok in region.tokens() {
        for ch in 0..CHANNELS {
            xs.push(grid.get(tok, ch));
            ys.push(half_value(c, tok, ch));
        }
    }
    pearson(&xs, &ys)
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Correlation of each prompted concept with its own region, in prompt order.
pub fn concept_scores(grid: &Matrix, prompt: &Prompt) -> Vec<f64> {
    prompt.placements().map(|(c, r)| template_correlation(grid, c, r)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub grid: Matrix,
    pub prompt: Prompt,
}

/// Every single-concept prompt and every ordered pair of distinct concepts.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub samples: Vec<ToySample>,
}

impl ToyDataset {
    pub fn two_concept() -> Self {
        let mut samples = Vec::new();
        for a in 0..NUM_CONCEPTS {
            let p = Prompt::new(vec![a]).expect("valid");
            samples.push(ToySample { grid: render(&p), prompt: p });
        }
        for a in 0..NUM_CONCEPTS {
            for b in 0..NUM_CONCEPTS {
                if a != b {
                    let p = Prompt::new(vec![a, b]).expect("valid");
                    samples.push(ToySample { grid: render(&p), prompt: p });
                }
            }
        }
        ToyDataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
