use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{ActionId, Environment, Observation, Outcome, SimRng, TabularMdp};

pub const UP: ActionId = ActionId(0);
pub const DOWN: ActionId = ActionId(1);
pub const LEFT: ActionId = ActionId(2);
pub const RIGHT: ActionId = ActionId(3);

/// Where Column World episodes begin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnStart {
    #[default]
    LeftColumn,
    RightColumn,
    Uniform,
}

/// A `size × size` grid with four deterministic moves clipped at the walls.
///
/// Moving into the rightmost column from any other column pays reward 1 and
/// ends the episode. Cells are numbered `row * size + col` with row 0 at the
/// top; the hidden state `size * size` is the absorbing terminal sink.
///
/// With `point_observations`, each visit to a cell emits a point drawn
/// uniformly from the cell's unit square inside `(0, size)²`, with `y`
/// growing upwards, so cell `(row 0, col 0)` covers `(0,1) × (size-1,size)`.
#[derive(Clone, Debug)]
pub struct ColumnWorld {
    size: usize,
    start: ColumnStart,
    point_observations: bool,
}

impl ColumnWorld {
    pub fn new(size: usize, start: ColumnStart, point_observations: bool) -> Self {
        assert!(size >= 2, "grid size must be at least 2");
        ColumnWorld {
            size,
            start,
            point_observations,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.size + col
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.size, cell % self.size)
    }

    pub fn sink(&self) -> usize {
        self.size * self.size
    }

    /// Deterministic move; returns `(next cell, reward, terminal)`.
    pub fn move_from(&self, cell: usize, action: ActionId) -> (usize, f64, bool) {
        let (row, col) = self.row_col(cell);
        let last = self.size - 1;
        let (r, c) = match action {
            UP => (row.saturating_sub(1), col),
            DOWN => ((row + 1).min(last), col),
            LEFT => (row, col.saturating_sub(1)),
            RIGHT => (row, (col + 1).min(last)),
            other => panic!("column world has no action {other}"),
        };
        let entering = c == last && col != last;
        (self.cell(r, c), if entering { 1.0 } else { 0.0 }, entering)
    }

    /// Ground-truth column of a hidden cell.
    pub fn column_of(&self, cell: usize) -> usize {
        cell % self.size
    }
}

impl Environment for ColumnWorld {
    fn action_count(&self) -> usize {
        4
    }

    fn hidden_state_count(&self) -> usize {
        self.size * self.size + 1
    }

    fn reset(&self, rng: &mut SimRng) -> usize {
        let row = rng.gen_range(0..self.size);
        match self.start {
            ColumnStart::LeftColumn => self.cell(row, 0),
            ColumnStart::RightColumn => self.cell(row, self.size - 1),
            ColumnStart::Uniform => self.cell(row, rng.gen_range(0..self.size)),
        }
    }

    fn step(&self, state: usize, action: ActionId, _rng: &mut SimRng) -> Outcome {
        let (next, reward, terminal) = self.move_from(state, action);
        Outcome {
            next,
            reward,
            terminal,
        }
    }

    fn observe(&self, state: usize, rng: &mut SimRng) -> Observation {
        if !self.point_observations {
            return Observation::Discrete(state);
        }
        let (row, col) = self.row_col(state);
        // Open interval: never emit a point on a cell boundary.
        let mut open = || loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                return u;
            }
        };
        let x = col as f64 + open();
        let y = (self.size - 1 - row) as f64 + open();
        Observation::Vector(vec![x, y])
    }

    fn terminal_observation(&self, _state: usize) -> Observation {
        if self.point_observations {
            Observation::Vector(vec![-1.0, -1.0])
        } else {
            Observation::Discrete(self.sink())
        }
    }

    fn label(&self, obs: &Observation) -> Option<usize> {
        match (obs, self.point_observations) {
            (Observation::Discrete(i), false) if *i <= self.sink() => Some(*i),
            (Observation::Vector(v), true) if v.len() == 2 => {
                if v[0] < 0.0 && v[1] < 0.0 {
                    return Some(self.sink());
                }
                let n = self.size as f64;
                if !(0.0..n).contains(&v[0]) || !(0.0..n).contains(&v[1]) {
                    return None;
                }
                let col = v[0].floor() as usize;
                let row = self.size - 1 - v[1].floor() as usize;
                Some(self.cell(row, col))
            }
            _ => None,
        }
    }

    fn label_name(&self, label: usize) -> String {
        if label == self.sink() {
            "terminal".to_string()
        } else {
            let (r, c) = self.row_col(label);
            format!("({r},{c})")
        }
    }

    fn tabular_model(&self) -> Option<TabularMdp> {
        let n = self.hidden_state_count();
        let sink = self.sink();
        let mut transitions = Vec::new();
        let mut rewards = Vec::new();
        for a in 0..4 {
            let mut p = DMatrix::zeros(n, n);
            let mut r = vec![0.0; n];
            for s in 0..sink {
                let (next, reward, terminal) = self.move_from(s, ActionId(a));
                p[(s, if terminal { sink } else { next })] = 1.0;
                r[s] = reward;
            }
            p[(sink, sink)] = 1.0;
            transitions.push(p);
            rewards.push(r);
        }
        let terminal = (0..n).map(|s| s == sink).collect();
        let mdp = TabularMdp::new(transitions, rewards, terminal).expect("valid by construction");
        let starts = (0..sink)
            .filter(|&s| match self.start {
                ColumnStart::LeftColumn => self.column_of(s) == 0,
                ColumnStart::RightColumn => self.column_of(s) == self.size - 1,
                ColumnStart::Uniform => true,
            })
            .collect();
        Some(mdp.with_starts(starts).expect("non-terminal starts"))
    }
}
