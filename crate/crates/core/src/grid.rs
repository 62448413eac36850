//! Discretised embedding space holding per-cell belief estimates.

use std::io::Write;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::belief::{bba_from_feedback, bba_from_training, combine, fuse_f, fuse_g, Bba, EMPTY};
use crate::dataset::SafetyAssessmentInput;
use crate::embedding::{map_input, MappingNetwork};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub cell_length: f64,
    pub cells: [usize; 2],
}

/// Where a point falls on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub cell: [usize; 2],
    pub out_of_grid: bool,
}

impl GridSpec {
    pub fn new(origin: [f64; 2], cell_length: f64, cells: [usize; 2]) -> Result<Self> {
        if !(cell_length > 0.0) || !cell_length.is_finite() {
            return Err(Error::invalid(format!("cell length must be positive, got {cell_length}")));
        }
        if cells[0] == 0 || cells[1] == 0 {
            return Err(Error::invalid("grid needs at least one cell per axis"));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(GridSpec {
            origin,
            cell_length,
            cells,
        })
    }

    /// Square cells covering the bounding box of `points` widened by
    /// `margin` of its extent on each side. With `cell_length` given, the
    /// grid keeps that length and is centred on the box instead.
    pub fn fit(points: &[Vec<f64>], cells: [usize; 2], margin: f64, cell_length: Option<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if points.iter().any(|p| p.len() != 2 || !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("grid points must be finite and two-dimensional"));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let length = match cell_length {
            Some(l) => l,
            None => {
                let need = (0..2)
                    .map(|a| (hi[a] - lo[a]) * (1.0 + 2.0 * margin) / cells[a] as f64)
                    .fold(0.0f64, f64::max);
                if need > 0.0 {
                    need
                } else {
                    1.0
                }
            }
        };
        let origin = [
            center[0] - length * cells[0] as f64 / 2.0,
            center[1] - length * cells[1] as f64 / 2.0,
        ];
        GridSpec::new(origin, length, cells)
    }

    pub fn cell_count(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    /// Flat row-major index with `ix` varying slowest.
    pub fn flat(&self, cell: [usize; 2]) -> usize {
        cell[0] * self.cells[1] + cell[1]
    }

    pub fn unflat(&self, index: usize) -> [usize; 2] {
        [index / self.cells[1], index % self.cells[1]]
    }

    /// Cell containing `y`. Points outside clamp to the nearest boundary cell.
    pub fn locate(&self, y: &[f64]) -> Result<Location> {
        if y.len() != 2 || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid lookup needs a finite two-dimensional point"));
        }
        let mut cell = [0usize; 2];
        let mut out = false;
        for a in 0..2 {
            let idx = ((y[a] - self.origin[a]) / self.cell_length).floor();
            let max = (self.cells[a] - 1) as f64;
            if idx < 0.0 || idx > max {
                out = true;
            }
            cell[a] = idx.clamp(0.0, max) as usize;
        }
        Ok(Location { cell, out_of_grid: out })
    }
}

/// Which count drives the decay of a cell's feedback uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    /// Total number of feedback data collected so far.
    Global,
    /// Number of feedback data in the cell.
    PerCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefParams {
    pub k_min: usize,
    pub alpha: f64,
    pub beta: f64,
    pub decay: DecayMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMember {
    pub y: [f64; 2],
    pub lambda: f64,
    pub mu: f64,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMember {
    pub y: [f64; 2],
    pub lambda: f64,
    pub lambda_hat: f64,
    pub cell: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub prior: Bba,
    pub feedback: Bba,
    pub combined: Bba,
    pub k_tilde: usize,
    pub k_bar: usize,
}

impl Default for Cell {
    fn default() -> Self {
        Cell {
            prior: EMPTY,
            feedback: EMPTY,
            combined: EMPTY,
            k_tilde: 0,
            k_bar: 0,
        }
    }
}

/// Result of one safety query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub gamma: f64,
    pub b_safe: f64,
    pub b_unsafe: f64,
    pub mu: f64,
    pub cell: [usize; 2],
    pub out_of_grid: bool,
    pub no_estimate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub spec: GridSpec,
    pub params: BeliefParams,
    pub training: Vec<TrainingMember>,
    pub feedback: Vec<FeedbackMember>,
    pub cells: Vec<Cell>,
}

fn point2(y: &[f64]) -> [f64; 2] {
    [y[0], y[1]]
}

impl GridModel {
    /// Model with training members at `points` carrying scores `lambdas`
    /// and uncertainty `mu_ini`; priors computed, no feedback.
    pub fn new(spec: GridSpec, params: BeliefParams, points: &[Vec<f64>], lambdas: &[f64], mu_ini: f64) -> Result<Self> {
        if points.len() != lambdas.len() {
            return Err(Error::invalid("one score per embedded point required"));
        }
        let training = points
            .iter()
            .zip(lambdas)
            .map(|(y, &lambda)| {
                bba_from_training(lambda, mu_ini)?;
                Ok(TrainingMember {
                    y: point2(y),
                    lambda,
                    mu: mu_ini,
                    cell: spec.flat(spec.locate(y)?.cell),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = GridModel {
            cells: vec![Cell::default(); spec.cell_count()],
            spec,
            params,
            training,
            feedback: Vec::new(),
        };
        model.recompute_priors();
        model.recompute_combined();
        Ok(model)
    }

    pub fn cell(&self, cell: [usize; 2]) -> &Cell {
        &self.cells[self.spec.flat(cell)]
    }

    pub fn n_f(&self) -> usize {
        self.feedback.len()
    }

    /// Prior of every cell from its training members; cells with fewer than
    /// `k_min` members get the empty assignment.
    pub fn recompute_priors(&mut self) {
        let mut members: Vec<Vec<Bba>> = vec![Vec::new(); self.cells.len()];
        for m in &self.training {
            members[m.cell].push(bba_from_training(m.lambda, m.mu).expect("member checked on insertion"));
        }
        for (cell, list) in self.cells.iter_mut().zip(members) {
            cell.k_tilde = list.len();
            cell.prior = if list.len() >= self.params.k_min && !list.is_empty() {
                fuse_f(&list)
            } else {
                EMPTY
            };
        }
    }

    pub fn add_feedback(&mut self, y: &[f64], lambda: f64, lambda_hat: f64) -> Result<()> {
        bba_from_feedback(lambda)?;
        let loc = self.spec.locate(y)?;
        self.feedback.push(FeedbackMember {
            y: point2(y),
            lambda,
            lambda_hat,
            cell: self.spec.flat(loc.cell),
        });
        Ok(())
    }

    pub fn recompute_feedback(&mut self) {
        let mut members: Vec<Vec<Bba>> = vec![Vec::new(); self.cells.len()];
        for m in &self.feedback {
            members[m.cell].push(bba_from_feedback(m.lambda).expect("member checked on insertion"));
        }
        let n_f = self.feedback.len();
        for (cell, list) in self.cells.iter_mut().zip(members) {
            cell.k_bar = list.len();
            let count = match self.params.decay {
                DecayMode::Global => n_f,
                DecayMode::PerCell => list.len(),
            };
            cell.feedback = fuse_g(&list, count, self.params.alpha, self.params.beta);
        }
    }

    pub fn recompute_combined(&mut self) {
        for cell in &mut self.cells {
            cell.combined = combine(&cell.prior, &cell.feedback);
        }
    }

    /// Assessment of a point already in the embedding space.
    pub fn assess_point(&self, y: &[f64]) -> Result<Assessment> {
        let loc = self.spec.locate(y)?;
        let b = self.cell(loc.cell).combined;
        let no_estimate = b.is_empty();
        Ok(Assessment {
            gamma: if no_estimate { 0.0 } else { b.b_safe },
            b_safe: b.b_safe,
            b_unsafe: b.b_unsafe,
            mu: b.mu,
            cell: loc.cell,
            out_of_grid: loc.out_of_grid,
            no_estimate,
        })
    }

    pub fn assess(&self, net: &MappingNetwork, x: &SafetyAssessmentInput) -> Result<Assessment> {
        if x.flatten().len() != net.input_dim() {
            return Err(Error::Incompatible(format!(
                "assessment input has dimension {}, model expects {}",
                x.flatten().len(),
                net.input_dim()
            )));
        }
        self.assess_point(&map_input(net, x)?)
    }

    pub fn populated_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.combined.is_empty()).count()
    }

    /// One row per cell: `ix,iy,b_safe,b_unsafe,mu,k_tilde,k_bar`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "ix,iy,b_safe,b_unsafe,mu,k_tilde,k_bar")?;
        for (i, c) in self.cells.iter().enumerate() {
            let [ix, iy] = self.spec.unflat(i);
            writeln!(
                out,
                "{ix},{iy},{},{},{},{},{}",
                c.combined.b_safe, c.combined.b_unsafe, c.combined.mu, c.k_tilde, c.k_bar
            )?;
        }
        Ok(())
    }
}

/// Latest published grid. Readers take a snapshot; the writer swaps in a
/// complete new model, so no reader sees a partial update.
#[derive(Debug)]
pub struct SharedGrid {
    current: RwLock<Arc<GridModel>>,
}

impl SharedGrid {
    pub fn new(model: GridModel) -> Self {
        SharedGrid {
            current: RwLock::new(Arc::new(model)),
        }
    }

    pub fn snapshot(&self) -> Arc<GridModel> {
        self.current.read().expect("grid lock poisoned").clone()
    }

    pub fn publish(&self, model: GridModel) {
        *self.current.write().expect("grid lock poisoned") = Arc::new(model);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BeliefParams {
        BeliefParams {
            k_min: 5,
            alpha: 0.4,
            beta: 0.3,
            decay: DecayMode::Global,
        }
    }

    fn unit_spec() -> GridSpec {
        GridSpec::new([0.0, 0.0], 1.0, [4, 4]).unwrap()
    }

    #[test]
    fn locate_examples() {
        let spec = GridSpec::new([-70.0, -70.0], 10.0, [14, 14]).unwrap();
        assert_eq!(spec.locate(&[-70.0, -70.0]).unwrap().cell, [0, 0]);
        let loc = spec.locate(&[-65.0, 5.0]).unwrap();
        assert_eq!(loc, Location { cell: [0, 7], out_of_grid: false });
        let far = spec.locate(&[1e6, -1e6]).unwrap();
        assert_eq!(far, Location { cell: [13, 0], out_of_grid: true });
        assert!(spec.locate(&[f64::NAN, 0.0]).is_err());
        assert!(GridSpec::new([0.0, 0.0], 0.0, [1, 1]).is_err());
    }

    #[test]
    fn fitted_grid_covers_points_with_margin() {
        let pts = vec![vec![-3.0, 1.0], vec![5.0, 2.0], vec![0.0, -1.0]];
        let spec = GridSpec::fit(&pts, [14, 14], 0.05, None).unwrap();
        assert!((spec.cell_length * 14.0 - 8.0 * 1.1).abs() < 1e-12);
        for p in &pts {
            assert!(!spec.locate(p).unwrap().out_of_grid);
        }
        let fixed = GridSpec::fit(&pts, [14, 14], 0.05, Some(10.0)).unwrap();
        assert_eq!(fixed.origin, [1.0 - 70.0, 0.5 - 70.0]);
    }

    #[test]
    fn prior_needs_minimum_members() {
        let mut pts = vec![vec![0.5, 0.5]; 4];
        pts.extend(vec![vec![2.5, 2.5]; 6]);
        let lambdas = vec![0.0; 10];
        let model = GridModel::new(unit_spec(), params(), &pts, &lambdas, 0.3).unwrap();
        assert_eq!(model.cell([0, 0]).k_tilde, 4);
        assert_eq!(model.cell([0, 0]).prior, EMPTY);
        let full = model.cell([2, 2]).prior;
        assert!(full.max_diff(&Bba::new(0.7, 0.0, 0.3).unwrap()) < 1e-12);
        assert_eq!(model.cell([3, 3]).prior, EMPTY);
    }

    #[test]
    fn assessment_lookup_and_empty_cells() {
        let pts = vec![vec![2.5, 2.5]; 6];
        let model = GridModel::new(unit_spec(), params(), &pts, &[0.0; 6], 0.3).unwrap();
        let a = model.assess_point(&[2.1, 2.9]).unwrap();
        assert!((a.gamma - 0.7).abs() < 1e-12 && !a.no_estimate);
        let b = model.assess_point(&[2.7, 2.2]).unwrap();
        assert_eq!(a.gamma, b.gamma);
        let e = model.assess_point(&[0.5, 0.5]).unwrap();
        assert!(e.no_estimate && e.mu == 1.0 && e.gamma == 0.0);
    }

    #[test]
    fn feedback_combines_with_prior() {
        let pts = vec![vec![2.5, 2.5]; 6];
        let mut model = GridModel::new(unit_spec(), params(), &pts, &[0.0; 6], 0.3).unwrap();
        let mut last = model.cell([2, 2]).combined.b_safe;
        for _ in 0..10 {
            model.add_feedback(&[2.5, 2.5], 1.0, 0.0).unwrap();
            model.recompute_feedback();
            model.recompute_combined();
            let now = model.cell([2, 2]).combined.b_safe;
            assert!(now < last);
            last = now;
        }
        assert_eq!(model.cell([2, 2]).k_bar, 10);
        assert_eq!(model.cell([1, 1]).feedback, EMPTY);
    }

    #[test]
    fn decay_modes_differ_only_in_count() {
        let pts = vec![vec![2.5, 2.5]; 6];
        let mut global = GridModel::new(unit_spec(), params(), &pts, &[0.0; 6], 0.3).unwrap();
        global.add_feedback(&[0.5, 0.5], 0.0, 0.0).unwrap();
        global.add_feedback(&[2.5, 2.5], 0.0, 0.0).unwrap();
        let mut per_cell = global.clone();
        per_cell.params.decay = DecayMode::PerCell;
        global.recompute_feedback();
        per_cell.recompute_feedback();
        assert!((global.cell([2, 2]).feedback.mu - 0.3 * (-0.4f64).exp()).abs() < 1e-15);
        assert!((per_cell.cell([2, 2]).feedback.mu - 0.3).abs() < 1e-15);
    }

    #[test]
    fn csv_has_row_per_cell() {
        let model = GridModel::new(unit_spec(), params(), &[vec![0.5, 0.5]], &[0.0], 0.3).unwrap();
        let mut buf = Vec::new();
        model.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.starts_with("ix,iy,b_safe,b_unsafe,mu,k_tilde,k_bar\n0,0,"));
    }

    #[test]
    fn published_snapshots_are_whole() {
        let model = GridModel::new(unit_spec(), params(), &[vec![0.5, 0.5]], &[0.0], 0.3).unwrap();
        let shared = SharedGrid::new(model.clone());
        let before = shared.snapshot();
        let mut next = model;
        next.add_feedback(&[0.5, 0.5], 1.0, 0.0).unwrap();
        next.recompute_feedback();
        next.recompute_combined();
        shared.publish(next);
        assert_eq!(before.n_f(), 0);
        assert_eq!(shared.snapshot().n_f(), 1);
    }
}
