//! Fixtures shared by the filter benchmarks.

use gridse::filters::MeasurementModel;
use gridse::netmodel::ieee14;
use gridse::powerflow::solve_power_flow;
use gridse::quadrature::QuadratureRule;
use gridse::{
    DMatrix, DVector, GridObservation, LikelihoodContext, LoadTable, MeasurementPlan, NoiseModel, PredictedBelief,
};

/// One update-only problem on the IEEE 14-bus grid: 14 voltage magnitudes and 14 real
/// injections, prior centred on a perturbed truth.
pub struct StaticProblem {
    pub obs: GridObservation,
    pub noise: NoiseModel,
    pub y: DVector<f64>,
    pub belief: PredictedBelief,
    pub rule: QuadratureRule,
}

impl StaticProblem {
    pub fn ieee14(seed: u64) -> Self {
        let model = ieee14();
        let truth = solve_power_flow(&model, &LoadTable::nominal(&model), 1e-10, 30).expect("nominal case solves");
        let plan = MeasurementPlan::random(&model, 28, seed);
        let obs = GridObservation::new(&model, &plan).expect("plan matches model");
        let noise = NoiseModel::for_plan(&plan, 0.02, 0.001, 1.0, 5.0, seed).expect("valid noise");
        let mut r = gridse::rng::stream(seed, &[gridse::rng::tag("bench")]);
        let y = obs.evaluate(truth.as_vector()) + noise.sample_with(&mut r);

        let d = truth.dim();
        let cov = DMatrix::from_fn(d, d, |i, j| match (i == j, i < d / 2) {
            (false, _) => 0.0,
            (true, true) => 1e-4,
            (true, false) => 4e-4,
        });
        let offset = DVector::from_fn(d, |i, _| if i % 2 == 0 { 0.005 } else { -0.005 });
        let belief = PredictedBelief::new(truth.as_vector() + offset, cov).expect("diagonal prior");
        let rule = QuadratureRule::default_for(d).expect("cubature rule");
        Self {
            obs,
            noise,
            y,
            belief,
            rule,
        }
    }

    pub fn context(&self) -> LikelihoodContext<'_> {
        LikelihoodContext::new(&self.obs, &self.y, &self.noise).expect("consistent sizes")
    }
}
