//! Metrics harness: clean/robust accuracy, per-class breakdowns, boundary
//! grids, and the CSV/JSON report formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{forward, NetworkSpec, ParamSet};
use crate::rng::stream;
use crate::tensor::{argmax, Tensor};

/// Evaluation batch size; results are order-independent reductions, so the
/// chunk size only affects memory and parallel grain.
const EVAL_CHUNK: usize = 128;

/// Accuracy summary for one model.
///
/// `a_bdy` is the boundary error `a_cln - a_rob_avg`, computed exactly from
/// the other two fields at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub a_cln: f64,
    /// Per-attack robust accuracy, in the order the attacks were given.
    pub a_rob: Vec<(String, f64)>,
    pub a_rob_avg: f64,
    pub a_bdy: f64,
}

impl Metrics {
    pub fn new(a_cln: f64, a_rob: Vec<(String, f64)>) -> Self {
        let a_rob_avg = if a_rob.is_empty() {
            0.0
        } else {
            a_rob.iter().map(|(_, v)| v).sum::<f64>() / a_rob.len() as f64
        };
        Self {
            a_cln,
            a_rob,
            a_rob_avg,
            a_bdy: a_cln - a_rob_avg,
        }
    }

    pub fn robust_for(&self, name: &str) -> Option<f64> {
        self.a_rob
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
    }
}

/// Per-round record: training losses always, metrics only on rounds where
/// evaluation ran. Serializes losslessly to JSON for the append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub metrics: Option<Metrics>,
    /// `(client_id, mean training loss)` for the round's participants.
    pub client_losses: Vec<(usize, f64)>,
    pub wall_ms: u64,
    pub config_hash: String,
}

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(|start| (start..(start + EVAL_CHUNK).min(n)).collect())
        .collect()
}

/// Fraction of argmax-correct predictions on the clean test set.
pub fn accuracy_clean(spec: &NetworkSpec, params: &ParamSet, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    let counts = exec::try_map(&chunks(test.len()), |idx| {
        let (x, y) = test.batch(idx);
        let (logits, _) = forward(spec, params, &x)?;
        Ok::<usize, Error>(
            (0..x.rows())
                .filter(|&i| argmax(logits.row(i)) == y[i])
                .count(),
        )
    })?;
    Ok(counts.iter().sum::<usize>() as f64 / test.len() as f64)
}

/// Robust accuracy under each attack plus their arithmetic mean. Attacks run
/// chunk by chunk with per-chunk random streams derived from `seed`, so the
/// result is independent of evaluation order and thread count.
pub fn accuracy_robust(
    spec: &NetworkSpec,
    params: &ParamSet,
    test: &Dataset,
    attack_cfgs: &[(String, AttackConfig)],
    seed: u64,
) -> Result<(Vec<(String, f64)>, f64)> {
    if attack_cfgs.is_empty() {
        return Err(Error::InvalidConfig("no evaluation attacks given".into()));
    }
    if test.is_empty() {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    let mut per_attack = Vec::with_capacity(attack_cfgs.len());
    for (atk_idx, (name, cfg)) in attack_cfgs.iter().enumerate() {
        let counts = exec::try_map(&chunks(test.len()), |idx| {
            let chunk_id = idx[0] as u64;
            let mut rng = stream(seed, "eval-attack", &[atk_idx as u64, chunk_id]);
            let (x, y) = test.batch(idx);
            let x_adv = attack(spec, params, &x, &y, cfg, &mut rng)?;
            let (logits, _) = forward(spec, params, &x_adv)?;
            Ok::<usize, Error>(
                (0..x.rows())
                    .filter(|&i| argmax(logits.row(i)) == y[i])
                    .count(),
            )
        })?;
        let acc = counts.iter().sum::<usize>() as f64 / test.len() as f64;
        per_attack.push((name.clone(), acc));
    }
    let avg = per_attack.iter().map(|(_, v)| v).sum::<f64>() / per_attack.len() as f64;
    Ok((per_attack, avg))
}

/// Full metrics in one call.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParamSet,
    test: &Dataset,
    attack_cfgs: &[(String, AttackConfig)],
    seed: u64,
) -> Result<Metrics> {
    let a_cln = accuracy_clean(spec, params, test)?;
    let (a_rob, _) = accuracy_robust(spec, params, test, attack_cfgs, seed)?;
    Ok(Metrics::new(a_cln, a_rob))
}

/// Per-class accuracy row; `None` marks a class absent from the test set
/// (reported as `na`, never as zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub clean: Option<f64>,
    pub robust: Option<f64>,
}

/// Clean (and, when an attack is supplied, robust) accuracy per class.
pub fn per_class_accuracy(
    spec: &NetworkSpec,
    params: &ParamSet,
    test: &Dataset,
    attack_cfg: Option<&AttackConfig>,
    seed: u64,
) -> Result<Vec<ClassAccuracy>> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    let c = test.num_classes;
    let mut totals = vec![0usize; c];
    let mut clean_hits = vec![0usize; c];
    let mut robust_hits = vec![0usize; c];

    for idx in chunks(test.len()) {
        let (x, y) = test.batch(&idx);
        let (logits, _) = forward(spec, params, &x)?;
        for i in 0..x.rows() {
            totals[y[i]] += 1;
            if argmax(logits.row(i)) == y[i] {
                clean_hits[y[i]] += 1;
            }
        }
        if let Some(cfg) = attack_cfg {
            let mut rng = stream(seed, "perclass-attack", &[idx[0] as u64]);
            let x_adv = attack(spec, params, &x, &y, cfg, &mut rng)?;
            let (logits, _) = forward(spec, params, &x_adv)?;
            for i in 0..x.rows() {
                if argmax(logits.row(i)) == y[i] {
                    robust_hits[y[i]] += 1;
                }
            }
        }
    }

    Ok((0..c)
        .map(|class| ClassAccuracy {
            class,
            clean: (totals[class] > 0)
                .then(|| clean_hits[class] as f64 / totals[class] as f64),
            robust: attack_cfg
                .and(
                    (totals[class] > 0)
                        .then(|| robust_hits[class] as f64 / totals[class] as f64),
                ),
        })
        .collect())
}

/// Bounding box for [`boundary_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

/// Predicted class at every cell center of a `resolution x resolution` grid
/// over the box. Rows are y-major: `grid[j][i]` is the cell at
/// `(x_i, y_j)`. Only valid for 2-D input models.
pub fn boundary_grid(
    spec: &NetworkSpec,
    params: &ParamSet,
    bounds: GridBounds,
    resolution: usize,
) -> Result<Vec<Vec<usize>>> {
    if spec.input_dim() != 2 {
        return Err(Error::InvalidConfig(format!(
            "boundary grid needs a 2-D input model, got input_dim = {}",
            spec.input_dim()
        )));
    }
    if resolution == 0 {
        return Err(Error::InvalidConfig("resolution must be >= 1".into()));
    }
    let cell = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * (i as f64 + 0.5) / resolution as f64;
    let rows: Vec<usize> = (0..resolution).collect();
    let grid = exec::try_map(&rows, |&j| {
        let y = cell(bounds.ymin, bounds.ymax, j);
        let mut data = Vec::with_capacity(resolution * 2);
        for i in 0..resolution {
            data.push(cell(bounds.xmin, bounds.xmax, i));
            data.push(y);
        }
        let batch = Tensor::new(vec![resolution, 2], data)?;
        let (logits, _) = forward(spec, params, &batch)?;
        Ok::<Vec<usize>, Error>((0..resolution).map(|i| argmax(logits.row(i))).collect())
    })?;
    Ok(grid)
}

pub const METRICS_CSV_HEADER: &str =
    "round,a_cln,a_rob_fgsm,a_rob_mim,a_rob_pgd,a_rob_avg,a_bdy,wall_ms";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".into(), |x| format!("{x}"))
}

/// One `metrics.csv` row. Attacks are looked up by name; absent attacks
/// print `na` so the column layout never shifts.
pub fn metrics_csv_row(round: u64, m: &Metrics, wall_ms: u64) -> String {
    format!(
        "{round},{},{},{},{},{},{},{wall_ms}",
        m.a_cln,
        fmt_opt(m.robust_for("fgsm")),
        fmt_opt(m.robust_for("mim")),
        fmt_opt(m.robust_for("pgd")),
        m.a_rob_avg,
        m.a_bdy
    )
}

/// Writes the per-class report as `class,clean_acc,robust_acc` CSV.
pub fn write_perclass_csv(rows: &[ClassAccuracy], path: &Path) -> Result<()> {
    let mut out = String::from("class,clean_acc,robust_acc\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.class,
            fmt_opt(row.clean),
            fmt_opt(row.robust)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Dumps a boundary grid as CSV: a named header line, the bounds/resolution
/// values, then one y-major row of class ids per line.
pub fn write_grid_csv(
    grid: &[Vec<usize>],
    bounds: GridBounds,
    resolution: usize,
    path: &Path,
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "xmin,xmax,ymin,ymax,resolution")?;
    writeln!(
        f,
        "{},{},{},{},{}",
        bounds.xmin, bounds.xmax, bounds.ymin, bounds.ymax, resolution
    )?;
    for row in grid {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_blobs;
    use crate::nn::LayerParams;
    use crate::rng::stream;

    /// Linear model over 2-D inputs deciding by the vertical line x0 = 0.5.
    fn vertical_line_model() -> (NetworkSpec, ParamSet) {
        let spec = NetworkSpec::mlp(2, &[], 2).unwrap();
        let a = 20.0;
        let params = ParamSet::from_layers(vec![LayerParams {
            name: "dense0".into(),
            weight: Tensor::new(vec![2, 2], vec![a, -a, 0.0, 0.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![-0.5 * a, 0.5 * a]).unwrap(),
        }]);
        (spec, params)
    }

    fn constant_model(c: usize) -> (NetworkSpec, ParamSet) {
        let spec = NetworkSpec::mlp(2, &[], c).unwrap();
        let params = ParamSet::from_layers(vec![LayerParams {
            name: "dense0".into(),
            weight: Tensor::zeros(vec![2, c]),
            bias: Tensor::zeros(vec![c]),
        }]);
        (spec, params)
    }

    #[test]
    fn constant_model_scores_one_over_c_on_balanced_data() {
        let ds = make_synthetic_blobs(400, 4, 0.05, 1).unwrap();
        let (spec, params) = constant_model(4);
        // Ties break to class 0, which holds exactly a quarter of the data.
        let acc = accuracy_clean(&spec, &params, &ds).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn separable_model_scores_one() {
        let ds = make_synthetic_blobs(200, 2, 0.02, 2).unwrap();
        let (spec, params) = vertical_line_model();
        let acc = accuracy_clean(&spec, &params, &ds).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_epsilon_attacks_match_clean_accuracy() {
        let ds = make_synthetic_blobs(150, 2, 0.1, 3).unwrap();
        let (spec, params) = vertical_line_model();
        let cfgs = vec![
            ("fgsm".to_string(), AttackConfig::fgsm(0.0)),
            ("pgd".to_string(), AttackConfig::pgd(0.0, 0.1, 5)),
        ];
        let clean = accuracy_clean(&spec, &params, &ds).unwrap();
        let (per, avg) = accuracy_robust(&spec, &params, &ds, &cfgs, 7).unwrap();
        for (_, acc) in &per {
            assert_eq!(*acc, clean);
        }
        assert_eq!(avg, clean);
    }

    #[test]
    fn metrics_identity_holds() {
        let m = Metrics::new(0.9, vec![("pgd".into(), 0.4), ("fgsm".into(), 0.6)]);
        assert_eq!(m.a_rob_avg, 0.5);
        assert_eq!(m.a_bdy, m.a_cln - m.a_rob_avg);
    }

    #[test]
    fn per_class_marks_absent_classes_na() {
        // Only classes 0 and 1 present in a 3-class problem.
        let mut ds = make_synthetic_blobs(100, 2, 0.05, 4).unwrap();
        ds.num_classes = 3;
        let (spec, params) = vertical_line_model();
        // Model is 2-class; widen to 3 outputs with a dead class.
        let spec3 = NetworkSpec::mlp(2, &[], 3).unwrap();
        let w = params.layers()[0].weight.data().to_vec();
        let b = params.layers()[0].bias.data().to_vec();
        let params3 = ParamSet::from_layers(vec![LayerParams {
            name: "dense0".into(),
            weight: Tensor::new(vec![2, 3], vec![w[0], w[1], 0.0, w[2], w[3], 0.0]).unwrap(),
            bias: Tensor::new(vec![3], vec![b[0], b[1], -100.0]).unwrap(),
        }]);
        let rows = per_class_accuracy(&spec3, &params3, &ds, None, 0).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].clean, Some(1.0));
        assert_eq!(rows[1].clean, Some(1.0));
        assert_eq!(rows[2].clean, None);
        assert_eq!(rows[2].robust, None);
    }

    #[test]
    fn boundary_grid_constant_model_is_uniform() {
        let (spec, params) = constant_model(3);
        let bounds = GridBounds {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
        };
        let grid = boundary_grid(&spec, &params, bounds, 8).unwrap();
        assert!(grid.iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn boundary_grid_single_cell() {
        let (spec, params) = vertical_line_model();
        let bounds = GridBounds {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
        };
        let grid = boundary_grid(&spec, &params, bounds, 1).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid[0].len(), 1);
        // Cell center (0.5, 0.5) sits on the line; tie goes to class 0.
        assert_eq!(grid[0][0], 0);
    }

    #[test]
    fn boundary_grid_matches_analytic_line() {
        let (spec, params) = vertical_line_model();
        let bounds = GridBounds {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
        };
        let res = 64;
        let grid = boundary_grid(&spec, &params, bounds, res).unwrap();
        let mut agree = 0;
        for (j, row) in grid.iter().enumerate() {
            assert_eq!(j, j); // y-major rows, one per y level
            for (i, &cls) in row.iter().enumerate() {
                let x = (i as f64 + 0.5) / res as f64;
                let analytic = usize::from(x <= 0.5);
                agree += usize::from(cls == analytic);
            }
        }
        let frac = agree as f64 / (res * res) as f64;
        assert!(frac > 0.99, "agreement {frac}");
    }

    #[test]
    fn boundary_grid_rejects_non_2d_models() {
        let spec = NetworkSpec::mlp(3, &[], 2).unwrap();
        let params = spec.init_params(&mut stream(0, "t", &[]));
        let bounds = GridBounds {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
        };
        assert!(boundary_grid(&spec, &params, bounds, 4).is_err());
    }

    #[test]
    fn round_report_round_trips_through_json() {
        let report = RoundReport {
            round: 12,
            metrics: Some(Metrics::new(
                0.91,
                vec![("fgsm".into(), 0.5), ("mim".into(), 0.45), ("pgd".into(), 0.4)],
            )),
            client_losses: vec![(0, 1.25), (7, 0.5)],
            wall_ms: 321,
            config_hash: "abcd1234".into(),
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: RoundReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn metrics_csv_row_layout() {
        let m = Metrics::new(
            0.875,
            vec![("fgsm".into(), 0.5), ("mim".into(), 0.25), ("pgd".into(), 0.125)],
        );
        let row = metrics_csv_row(3, &m, 42);
        assert_eq!(
            row,
            format!("3,0.875,0.5,0.25,0.125,{},{},42", m.a_rob_avg, m.a_bdy)
        );
        let only_pgd = Metrics::new(0.5, vec![("pgd".into(), 0.25)]);
        let row = metrics_csv_row(0, &only_pgd, 0);
        assert!(row.contains(",na,na,0.25,"));
    }
}
