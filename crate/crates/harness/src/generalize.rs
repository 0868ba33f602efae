use ara_budget::optimizer::{objective, optimal_alpha, optimize};
use ara_budget::synthgen::generate_draw;
use ara_budget::{
    BudgetParams64, Error, ObjectiveContext64, OptimizerSettings, Result, SynthConfig64,
};
use serde::Serialize;

/// Grid resolution along each axis (count limit, clip quantile).
pub const GRID_SIDE: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct GridPoint {
    pub count_limit: u64,
    pub quantile: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneralizationReport {
    pub epsilon: f64,
    pub num_slices: usize,
    pub chosen: BudgetParams64,
    /// `R` on the evaluation draw at the parameters fitted on the
    /// training draw.
    pub test_objective: f64,
    pub grid_min: f64,
    pub grid_best: GridPoint,
    /// `(test_objective - grid_min) / grid_min`; negative when the fitted
    /// parameters beat every grid point.
    pub gap: f64,
}

/// `GRID_SIDE` count limits spread evenly over `1..=c_max`.
pub fn count_grid(c_max: u64) -> Vec<u64> {
    let top = c_max.max(1);
    let mut out: Vec<u64> = (0..GRID_SIDE)
        .map(|i| 1 + ((top - 1) as f64 * i as f64 / (GRID_SIDE - 1) as f64).round() as u64)
        .collect();
    out.dedup();
    out
}

/// Optimizes on draw 1 of `cfg` and compares the relaxed objective on an
/// evaluation draw (2, or 1 again with `same_draw`) against a grid of
/// count limits and clip quantiles. Grid thresholds are quantiles of the
/// values the evaluation draw keeps at that count limit; fractions use the
/// closed-form optimum on the evaluation draw. τ comes from the training
/// draw for both.
pub fn generalization_check(
    cfg: &SynthConfig64,
    epsilon: f64,
    gamma: u64,
    settings: &OptimizerSettings,
    same_draw: bool,
) -> Result<GeneralizationReport> {
    let train = generate_draw(cfg, 1)?.dataset;
    let eval = if same_draw {
        train.clone()
    } else {
        generate_draw(cfg, 2)?.dataset
    };
    let tau = train.median_tau()?;
    let fit_ctx = ObjectiveContext64::new(&train, tau.clone(), epsilon, gamma)?;
    let chosen = optimize(&fit_ctx, settings)?.params;
    let ctx = ObjectiveContext64::new(&eval, tau, epsilon, gamma)?;
    let test_objective = objective(&ctx, &chosen)?.sqrt();

    let d = ctx.num_queries();
    let mut best: Option<GridPoint> = None;
    for c in count_grid(ctx.max_conversions()) {
        let t = ctx.bias_tables(c);
        for i in 1..=GRID_SIDE {
            let q = i as f64 / GRID_SIDE as f64;
            let clips: Vec<f64> = (1..=d)
                .map(|l| ctx.kept_quantile(&t, l, q).filter(|&x| x > 0.0).unwrap_or(1.0))
                .collect();
            let alphas = optimal_alpha(&ctx, c, &clips);
            let r = objective(&ctx, &BudgetParams64::linf(c, clips, alphas))?.sqrt();
            if best.as_ref().is_none_or(|b| r < b.objective) {
                best = Some(GridPoint {
                    count_limit: c,
                    quantile: q,
                    objective: r,
                });
            }
        }
    }
    let grid_best = best.ok_or_else(|| Error::Numerical("empty parameter grid".into()))?;
    let grid_min = grid_best.objective;
    if !(test_objective.is_finite() && grid_min.is_finite() && grid_min > 0.0) {
        return Err(Error::Numerical(format!(
            "degenerate objectives: fitted {test_objective}, grid {grid_min}"
        )));
    }
    Ok(GeneralizationReport {
        epsilon,
        num_slices: eval.num_slices(),
        chosen,
        test_objective,
        grid_min,
        gap: (test_objective - grid_min) / grid_min,
        grid_best,
    })
}
