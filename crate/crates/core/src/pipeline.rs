//! The full verification chain as an executable pipeline: build systems,
//! certify the maximal-truncation and off-diagonal hypotheses, run the
//! stopping construction and build the suppression profile, verify the
//! modified systems under the suppressed operator, check the diagonal
//! pairing bound, sample the reduced pairing estimate, construct bounded
//! test functions for the original operator from the zero set of the
//! profile, extract a stopping family for them, and finish with the
//! indicator testing constants.
//!
//! Every measured constant is evaluated at the configured depth and once
//! more one level deeper; the pass criterion is agreement within the
//! configured band. Certificates that hold exactly on the grid are checked
//! as booleans at both depths.

use crate::accretive::{
    make_indicator_system, make_rough_system, restrict_to_sparse, validate, AccretiveSystem,
};
use crate::bilinear::{
    baby_tb_bound, coefficient_kernel_norms, decompose_pairing, nested_split, systems_identical,
    wbp_check, WbpMode,
};
use crate::config::{RunConfig, SystemKind};
use crate::dyadic::{hardy_check, CubeSums, DyadicCube, GridFunction};
use crate::error::{Error, Result};
use crate::kernels::{make_kernel, suppressed_bound_check, verify_cz_estimates, CZKernel, KernelParams};
use crate::martingale::{
    carleson_embedding_check, decompose, paraproduct_carleson_norms, square_function_norm,
    AdaptedSystem, SquareFunctionVariant,
};
use crate::operators::{maximal_truncation_at, DiscreteOperator};
use crate::report::{Direction, VerificationReport};
use crate::scalar::Real;
use crate::stopping::{
    error_envelope_norm, forest_to_sparse_system, iterate_forest, merged_profile,
    offdiag_verify, suppressed_testfn_verify, StoppingForest, StoppingParams,
};
use crate::testfns::{lacunary_comb, refined_noise};
use std::collections::BTreeMap;

const LP_EXPONENTS: [f64; 3] = [1.5, 2.0, 3.0];

/// All measurements of one run at one depth.
#[derive(Default)]
pub struct RunOutputs {
    pub constants: Vec<(String, String, f64)>,
    pub checks: Vec<(String, String, bool, String)>,
}

impl RunOutputs {
    fn constant(&mut self, id: &str, desc: &str, value: f64) {
        self.constants.push((id.to_string(), desc.to_string(), value));
    }

    fn check(&mut self, id: &str, desc: &str, pass: bool, detail: String) {
        self.checks.push((id.to_string(), desc.to_string(), pass, detail));
    }
}

/// Constants whose worst case is a minimum rather than a maximum.
fn direction_of(id: &str) -> Direction {
    if id.contains("nondeg") {
        Direction::Lower
    } else {
        Direction::Upper
    }
}

/// Constants that are recorded without a stability verdict: fitted slopes
/// and construction parameters that the certificates already police.
fn record_only(id: &str) -> bool {
    id.ends_with("slope")
        || id.ends_with("-term")
        || id.starts_with("tau")
        || id.starts_with("param-")
        || id.starts_with("phi-support-fraction")
        || id.starts_with("suppressed-bound-m")
}

/// Run the whole chain at the configured dimension.
pub fn run_pipeline(config: &RunConfig) -> Result<VerificationReport> {
    config.validate()?;
    match config.dim {
        1 => run_generic::<1>(config),
        2 => run_generic::<2>(config),
        _ => unreachable!("validated dimension"),
    }
}

fn run_generic<const D: usize>(config: &RunConfig) -> Result<VerificationReport> {
    let coarse = run_once::<D>(config, config.depth)?;
    let fine = run_once::<D>(config, config.depth + 1)?;
    let mut report = VerificationReport::new(config.clone());

    let fine_map: BTreeMap<String, f64> =
        fine.constants.iter().map(|(id, _, v)| (id.clone(), *v)).collect();
    for (id, desc, value) in &coarse.constants {
        match fine_map.get(id) {
            Some(fv) if !record_only(id) => {
                report.push_stable(id, desc, *value, *fv, config.stability_band, direction_of(id));
            }
            Some(fv) => report.push_recorded(id, desc, *value, Some(*fv)),
            None => report.push_recorded(id, desc, *value, None),
        }
    }
    for (id, desc, pass, detail) in &coarse.checks {
        report.push_check(id, desc, *pass, format!("depth {}: {detail}", config.depth));
    }
    for (id, desc, pass, detail) in &fine.checks {
        report.push_check(id, desc, *pass, format!("depth {}: {detail}", config.depth + 1));
    }

    report.push_stage("kernel", &["config"], &["kernel", "operator"]);
    report.push_stage("systems", &["config"], &["system-1", "system-2"]);
    report.push_stage("maximal-truncation", &["operator", "system-2"], &["cotlar", "tmax-testing"]);
    report.push_stage("off-diagonal", &["operator", "system-1"], &["offdiag-certificates"]);
    report.push_stage("stopping", &["system-1", "system-2", "operator"], &["forest", "profile"]);
    report.push_stage("suppress", &["kernel", "profile"], &["suppressed-operator", "good-systems"]);
    report.push_stage("martingale", &["good-systems"], &["square-functions", "carleson"]);
    report.push_stage("bilinear", &["suppressed-operator", "good-systems"], &["pairing-parts"]);
    report.push_stage("weak-boundedness", &["suppressed-operator", "good-systems"], &["wbp"]);
    report.push_stage("reduced-bound", &["suppressed-operator", "good-systems"], &["baby-tb"]);
    report.push_stage(
        "final",
        &["profile", "operator"],
        &["bounded-system", "final-baby-tb", "indicator-testing"],
    );
    Ok(report)
}

/// One full pass at a fixed depth. Suprema over cube families enumerate
/// cubes down to the configured depth at every run depth, so the two-depth
/// comparison refines quadrature over one fixed family.
pub fn run_once<const D: usize>(config: &RunConfig, depth: u32) -> Result<RunOutputs> {
    let mut out = RunOutputs::default();
    let cap = config.depth;
    type T = f64;

    // Stage: kernel.
    let params = KernelParams { alpha: config.kernel.alpha, lipschitz: config.kernel.lipschitz };
    let kernel: CZKernel<T, D> = make_kernel(config.kernel.name, params, depth)
        .map_err(|e| e.in_stage("kernel"))?;
    let op = DiscreteOperator::new(kernel.clone(), depth);
    if config.verifier_active("kernel") {
        let cz = verify_cz_estimates(&kernel, config.samples.kernel_samples, config.seed ^ 0x11)
            .map_err(|e| e.in_stage("kernel"))?;
        out.constant("cz-size-ratio", "worst normalized kernel size quotient", cz.max_size_ratio);
        out.constant(
            "cz-holder-ratio",
            "worst normalized kernel smoothness quotient",
            cz.max_holder_x_ratio.max(cz.max_holder_y_ratio),
        );
        out.check(
            "cz-size-bound",
            "measured size quotient within the declared constant",
            cz.max_size_ratio <= kernel.size_const + 1e-9,
            format!("{} vs {}", cz.max_size_ratio, kernel.size_const),
        );
        out.check(
            "cz-holder-bound",
            "measured smoothness quotient within the declared constant",
            cz.max_holder_x_ratio.max(cz.max_holder_y_ratio) <= kernel.holder_const,
            format!(
                "{} vs {}",
                cz.max_holder_x_ratio.max(cz.max_holder_y_ratio),
                kernel.holder_const
            ),
        );
        out.check(
            "kernel-antisymmetry-flag",
            "sampled antisymmetry defect matches the declared flag",
            (cz.antisymmetry_defect < 1e-12) == kernel.antisymmetric,
            format!("defect {}", cz.antisymmetry_defect),
        );
        // Suppressed-kernel bound study across damping powers.
        let probe = DyadicCube::<D>::new(2.min(depth), [1; D]);
        let reports = suppressed_bound_check(
            &kernel,
            &probe,
            &config.suppression_report_powers(),
            1000,
            config.seed ^ 0x12,
        )
        .map_err(|e| e.in_stage("kernel"))?;
        for r in reports {
            out.constant(
                &format!("suppressed-bound-m{}", r.suppression_power),
                "normalized suppressed-kernel bound inside a bad cube",
                r.max_normalized,
            );
        }
    }

    // Stage: systems.
    let p = config.system.p;
    let (sys1, sys2): (AccretiveSystem<T, D>, AccretiveSystem<T, D>) = match config.system.kind {
        SystemKind::Indicator => {
            let s = make_indicator_system::<T, D>(depth);
            (s.clone(), s)
        }
        SystemKind::Rough => (
            make_rough_system::<T, D>(
                depth,
                p,
                config.system.roughness,
                config.seed ^ config.system.seed,
                config.system.max_spike_level,
            )
            .map_err(|e| e.in_stage("systems"))?,
            make_rough_system::<T, D>(
                depth,
                p,
                config.system.roughness,
                config.seed ^ config.system.adjoint_seed,
                config.system.max_spike_level,
            )
            .map_err(|e| e.in_stage("systems"))?,
        ),
    };
    let antisymmetric_case = kernel.antisymmetric && systems_identical(&sys1, &sys2);
    let use_offdiag = config.stopping.use_offdiag.unwrap_or(!antisymmetric_case);
    let root = DyadicCube::<D>::root();

    if config.verifier_active("systems") {
        let v1 = validate(&sys1, &op).map_err(|e| e.in_stage("systems"))?;
        out.constant("system-nondeg", "worst mean of the primary system", v1.worst_nondeg);
        out.constant("system-size", "worst normalized size of the primary system", v1.worst_size);
        out.constant("system-testing", "worst normalized testing average", v1.worst_testing);
        out.constant("system-buffered", "worst doubled-cube testing average", v1.worst_buffered);
        out.constant("system-global", "worst globalized testing norm", v1.worst_global);
        // The Hardy quotient on the primary root function and the indicator.
        let b_root = sys1.get(&root).expect("root function");
        let h1 = hardy_check(b_root, &root, T::lit(config.exponents.u))
            .map_err(|e| e.in_stage("systems"))?;
        let ind = GridFunction::<T, D>::indicator(depth, &root);
        let h2 = hardy_check(&ind, &root, T::lit(config.exponents.u))
            .map_err(|e| e.in_stage("systems"))?;
        out.constant("hardy-constant", "worst collar quotient", h1.ratio.max(h2.ratio));
    }

    // Stage: maximal truncation domination and testing.
    if config.verifier_active("cotlar") {
        let mut worst = 0.0f64;
        for i in 0..config.samples.random_inputs {
            let f: GridFunction<T, D> = if i % 2 == 0 {
                refined_noise(depth, 6.min(depth), config.seed ^ (0x100 + i as u64))
            } else {
                lacunary_comb(depth, 5.min(depth), config.seed ^ (0x200 + i as u64))
            };
            let rep = crate::operators::cotlar_check(
                &op,
                &sys2,
                &f,
                T::lit(config.exponents.q),
                T::lit(config.exponents.v),
            )
            .map_err(|e| e.in_stage("maximal-truncation"))?;
            worst = worst.max(rep.c_cotlar);
        }
        out.constant(
            "cotlar-constant",
            "worst pointwise domination of the maximal truncation",
            worst,
        );

        // Buffered testing of the maximal truncation over doubled cubes.
        let u = config.exponents.u;
        let mut worst_tmax = 0.0f64;
        for q in DyadicCube::<D>::all(cap) {
            let b = sys1.get(&q).expect("full system");
            let double = q.double::<T>();
            let pm = crate::dyadic::padded_cells_per_side(depth);
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for idx in crate::dyadic::MultiIndexIter::new([pm; D]) {
                let x = crate::dyadic::padded_center::<T, D>(depth, &idx);
                if double.contains(&x) {
                    acc += maximal_truncation_at(&kernel, b, &x).powf(u);
                    n += 1;
                }
            }
            worst_tmax = worst_tmax.max((acc / n as f64).powf(1.0 / u));
        }
        out.constant(
            "tmax-buffered-testing",
            "worst doubled-cube testing average of the maximal truncation",
            worst_tmax,
        );
    }

    // Stage: off-diagonal certificates.
    if config.verifier_active("offdiag") {
        for &lambda in &config.stopping.lambda_levels {
            let rep = offdiag_verify(&sys1, &op, &root, lambda, cap)
                .map_err(|e| e.in_stage("off-diagonal"))?;
            out.constant(
                &format!("offdiag-worst-average-l{lambda}"),
                "worst off-diagonal average over the ample collection",
                rep.worst_average,
            );
            out.check(
                &format!("offdiag-chebyshev-l{lambda}"),
                "violating-cube measure within the Chebyshev budget",
                rep.violator_measure <= rep.violator_bound + 1e-12,
                format!("{} vs {}", rep.violator_measure, rep.violator_bound),
            );
        }
    }

    // Stage: stopping forest and profile.
    let stopping_params = StoppingParams {
        delta: config.stopping.delta,
        cz_const: config.stopping.cz_const,
        eta: config.stopping.eta,
        eps: config.stopping.eps,
        sigma: config.stopping.sigma,
        use_offdiag,
        suppression_power: config.suppression_power(),
    };
    let forest1 =
        iterate_forest(&sys1, &kernel, &root, &stopping_params).map_err(|e| e.in_stage("stopping"))?;
    let forest2 = if antisymmetric_case {
        None
    } else {
        Some(
            iterate_forest(&sys2, &kernel.transpose(), &root, &stopping_params)
                .map_err(|e| e.in_stage("stopping"))?,
        )
    };
    let forests: Vec<&StoppingForest<T, D>> =
        std::iter::once(&forest1).chain(forest2.as_ref()).collect();
    let phi = merged_profile(&forests, config.suppression_power())
        .map_err(|e| e.in_stage("stopping"))?;

    if config.verifier_active("stopping") {
        let rep1 = forest1.report();
        out.constant("tau-measured", "measured sparseness margin", rep1.tau_measured);
        out.constant("tau-chain", "a priori sparseness margin", rep1.tau_chain);
        out.constant("param-eps", "testing budget used by the scans", rep1.eps_used);
        out.constant("param-sigma", "off-diagonal budget used by the scans", rep1.sigma_used);
        out.constant(
            "param-cz-const",
            "effective size-threshold numerator",
            rep1.cz_const_effective,
        );
        out.constant(
            "param-ball-inclusion",
            "derived ball-in-doubled-cube constant of this dimension",
            crate::dyadic::ball_in_doubled_cube_constant::<D>(),
        );
        // For antisymmetric runs the off-diagonal scan is optional; record
        // the margin both with and without it.
        if antisymmetric_case && !use_offdiag {
            let mut with = stopping_params.clone();
            with.use_offdiag = true;
            let alt = iterate_forest(&sys1, &kernel, &root, &with)
                .map_err(|e| e.in_stage("stopping"))?;
            out.constant(
                "tau-with-offdiag",
                "measured margin when the off-diagonal condition also scans",
                alt.tau_measured,
            );
        }
        out.check(
            "forest-generation-decay",
            "per-generation measures within the certified geometric bounds",
            rep1.generations_certified,
            format!("{:?}", rep1.t_generation_measures),
        );
        out.check(
            "forest-bad-measure",
            "size-stopping measure within the per-cube budget",
            rep1
                .b_generation_measures
                .iter()
                .zip(&rep1.b_generation_bounds)
                .all(|(m, b)| m <= &(b + 1e-12)),
            format!("{:?}", rep1.b_generation_measures),
        );
        out.check(
            "forest-total-bad",
            "total size-stopping measure within delta/tau",
            rep1.total_bad_measure <= rep1.total_bad_bound + 1e-12,
            format!("{} vs {}", rep1.total_bad_measure, rep1.total_bad_bound),
        );
        // Envelope norm on the root split.
        if let Some(node) = forest1.nodes.get(&root) {
            let env = error_envelope_norm(&node.decomposition, 2.0)
                .map_err(|e| e.in_stage("stopping"))?;
            out.constant("envelope-ratio", "tail-envelope norm against the base scale", env.ratio);
        }
        // Profile support: exact grid identity and certified budget.
        let support = phi.positive_measure().to_f64_lossy();
        let total_bad: f64 = forests.iter().map(|f| f.total_bad_measure()).sum();
        let tau = forests.iter().map(|f| f.tau_measured).fold(1.0f64, f64::min);
        let budget =
            forests.len() as f64 * 3f64.powi(D as i32) * config.stopping.delta / tau.max(1e-300);
        out.constant("phi-support-fraction", "measure of the positive set of the profile", support);
        out.check(
            "phi-support-grid",
            "profile support within the tripled bad measure, exactly on the grid",
            support <= 3f64.powi(D as i32) * total_bad + 1e-12,
            format!("{support} vs {}", 3f64.powi(D as i32) * total_bad),
        );
        out.check(
            "phi-support-budget",
            "profile support within the certified fraction",
            support <= budget + 1e-12,
            format!("{support} vs {budget}"),
        );
        // Lipschitz bound of the profile at cell resolution, and domination
        // of every single-cube lower profile.
        let inner = phi.inner_grid();
        let h = 0.5f64.powi(depth as i32);
        let mut lipschitz_ok = true;
        let m = crate::dyadic::cells_per_side(depth);
        for idx in crate::dyadic::MultiIndexIter::new([m; D]) {
            for axis in 0..D {
                if idx[axis] + 1 < m {
                    let mut jdx = idx;
                    jdx[axis] += 1;
                    let a = inner.values()[inner.linear_index(&idx)];
                    let b = inner.values()[inner.linear_index(&jdx)];
                    lipschitz_ok &= (a - b).abs() <= h + 1e-12;
                }
            }
        }
        out.check("phi-lipschitz", "profile is 1-Lipschitz at cell resolution", lipschitz_ok, String::new());
        let mut lower_ok = true;
        for f in &forests {
            for q in f.all_bad_cubes() {
                let t = q.triple::<f64>();
                for i in 0..inner.len() {
                    let x = inner.center_of_linear(i);
                    lower_ok &= inner.values()[i] >= t.dist_to_complement(&x) - 1e-12;
                }
            }
        }
        out.check(
            "phi-lower-bound",
            "profile dominates the distance profile of every bad cube",
            lower_ok,
            String::new(),
        );
    }

    // Stage: suppressed operator and modified systems.
    let op_phi = DiscreteOperator::suppressed(&kernel, depth, &phi);
    let good1 = forest_to_sparse_system(&forest1).map_err(|e| e.in_stage("suppress"))?;
    let good2 = match &forest2 {
        Some(f2) => forest_to_sparse_system(f2).map_err(|e| e.in_stage("suppress"))?,
        None => good1.clone(),
    };
    if config.verifier_active("suppress") {
        let rep = suppressed_testfn_verify(&forest1, &phi, &kernel, cap)
            .map_err(|e| e.in_stage("suppress"))?;
        out.constant("suppressed-testing", "worst suppressed testing average", rep.worst_testing);
        out.constant("suppressed-offdiag", "worst suppressed off-diagonal average", rep.worst_offdiag);
        out.constant("suppressed-nondeg", "worst admissible mean of the good parts", rep.worst_nondeg);
        out.constant("good-sup-norm", "sup norm of the good parts", rep.sup_good_norm);
        out.constant(
            "suppressed-pointwise-domination",
            "pointwise domination of the suppressed image of the good part",
            rep.pointwise_domination,
        );
        out.check(
            "good-norm-bound",
            "good parts within the split-threshold sup bound",
            rep.sup_good_norm <= rep.good_norm_bound + 1e-9,
            format!("{} vs {}", rep.sup_good_norm, rep.good_norm_bound),
        );
        // Domination of the suppressed operator by maximal operators.
        let f: GridFunction<T, D> = refined_noise(depth, 6.min(depth), config.seed ^ 0x31);
        let dom = crate::operators::suppressed_domination_check(&kernel, &phi, &f)
            .map_err(|e| e.in_stage("suppress"))?;
        out.constant("suppression-domination", "suppressed image against maximal operators", dom.c_suppression);
        // Agreement on the zero set is exact by construction.
        let mut agree = true;
        let b_root = sys1.get(&root).expect("root function");
        let zero_mask: Vec<bool> = (0..b_root.len())
            .map(|i| phi.eval(&b_root.center_of_linear(i)) == 0.0)
            .collect();
        let carrier = GridFunction::<T, D>::from_values(
            depth,
            b_root
                .values()
                .iter()
                .zip(&zero_mask)
                .map(|(&v, &z)| if z { v } else { 0.0 })
                .collect(),
        )
        .expect("carrier");
        let t_carrier = op.apply(&carrier).map_err(|e| e.in_stage("suppress"))?;
        let tphi_carrier = op_phi.apply(&carrier).map_err(|e| e.in_stage("suppress"))?;
        for i in 0..carrier.len() {
            if zero_mask[i] {
                agree &= t_carrier.values()[i] == tphi_carrier.values()[i];
            }
        }
        out.check(
            "tphi-agrees-on-zero-set",
            "suppressed and plain images coincide exactly where the profile vanishes",
            agree,
            String::new(),
        );
    }

    // Stage: martingale estimates for the modified systems.
    let adapted1 = AdaptedSystem::new(&good1).map_err(|e| e.in_stage("martingale"))?;
    let adapted2 = AdaptedSystem::new(&good2).map_err(|e| e.in_stage("martingale"))?;
    if config.verifier_active("martingale") {
        for r in LP_EXPONENTS {
            let mut worst_direct = 0.0f64;
            let mut worst_adjoint = 0.0f64;
            for i in 0..config.samples.random_inputs {
                let f: GridFunction<T, D> =
                    refined_noise(depth, 6.min(depth), config.seed ^ (0x400 + i as u64));
                let norm = f.lp_norm(r);
                if norm == 0.0 {
                    continue;
                }
                let dec = decompose(&f, &adapted1).map_err(|e| e.in_stage("martingale"))?;
                let d = square_function_norm(&dec, r, SquareFunctionVariant::Direct, 1)
                    .map_err(|e| e.in_stage("martingale"))?;
                let a = square_function_norm(&dec, r, SquareFunctionVariant::Adjoint, 1)
                    .map_err(|e| e.in_stage("martingale"))?;
                worst_direct = worst_direct.max(d / norm);
                worst_adjoint = worst_adjoint.max(a / norm);
            }
            out.constant(
                &format!("lp-ratio-direct-r{r}"),
                "square function against the input norm",
                worst_direct,
            );
            out.constant(
                &format!("lp-ratio-adjoint-r{r}"),
                "transposed square function against the input norm",
                worst_adjoint,
            );
        }
        let s = config.exponents.s;
        let para = paraproduct_carleson_norms(&adapted1, &adapted2, &op_phi, s, cap)
            .map_err(|e| e.in_stage("martingale"))?;
        out.constant(
            "paraproduct-carleson-diff",
            "localized norm of the difference-side coefficients",
            para.norm_difference_side,
        );
        out.constant(
            "paraproduct-carleson-omega",
            "localized norm of the correction-side coefficients",
            para.norm_omega_side,
        );
        // Embedding ratio against the paraproduct coefficients.
        let adj = op_phi.adjoint();
        let mut theta: BTreeMap<DyadicCube<D>, GridFunction<T, D>> = BTreeMap::new();
        let mut adj_images: BTreeMap<DyadicCube<D>, GridFunction<T, D>> = BTreeMap::new();
        for mcube in adapted2.members() {
            let b = adapted2.member_fn(mcube).expect("member function");
            adj_images.insert(*mcube, adj.apply(b).map_err(|e| e.in_stage("martingale"))?);
        }
        for q in DyadicCube::<D>::all(cap.min(depth) - 1) {
            let h = &adj_images[&adapted2.ancestor(&q)];
            theta.insert(q, adapted1.difference_adjoint(&q, h).restricted_to(&q));
        }
        let mut worst_ratio = 0.0f64;
        for i in 0..config.samples.random_inputs {
            let g: GridFunction<T, D> =
                refined_noise(depth, 6.min(depth), config.seed ^ (0x500 + i as u64));
            let rep =
                carleson_embedding_check(&theta, &g, s).map_err(|e| e.in_stage("martingale"))?;
            worst_ratio = worst_ratio.max(rep.ratio);
        }
        out.constant("carleson-ratio", "embedding ratio over sampled inputs", worst_ratio);
    }

    // Stage: bilinear decomposition under the suppressed operator.
    if config.verifier_active("bilinear") {
        let mut worst_defect = 0.0f64;
        let mut worst_nested = 0.0f64;
        let mut psi_sup = 0.0f64;
        let mut ktilde_slope = 0.0f64;
        for i in 0..2usize {
            let f: GridFunction<T, D> =
                refined_noise(depth, 6.min(depth), config.seed ^ (0x600 + i as u64));
            let g: GridFunction<T, D> =
                lacunary_comb(depth, 5.min(depth), config.seed ^ (0x700 + i as u64));
            let pairing = decompose_pairing(&op_phi, &f, &g, &adapted1, &adapted2)
                .map_err(|e| e.in_stage("bilinear"))?;
            worst_defect = worst_defect.max(pairing.resum_defect);
            let split = nested_split(&op_phi, &f, &g, &adapted1, &adapted2)
                .map_err(|e| e.in_stage("bilinear"))?;
            worst_nested = worst_nested.max(split.identity_defect);
            psi_sup = psi_sup.max(split.psi_sup_norm);
            ktilde_slope = split.ktilde_slope;
        }
        out.check(
            "pairing-resum",
            "pairing parts re-sum to the direct pairing",
            worst_defect < 1e-8,
            format!("worst defect {worst_defect}"),
        );
        out.check(
            "nested-identity",
            "nested part splits into paraproduct plus remainder",
            worst_nested < 1e-8,
            format!("worst defect {worst_nested}"),
        );
        out.constant("psi-sup-norm", "sup norm of the corrected coefficients", psi_sup);
        out.constant("ktilde-slope", "nested coefficient-kernel decay slope", ktilde_slope);

        let k_max = 5.min(depth.saturating_sub(1));
        let coeff = coefficient_kernel_norms(&op_phi, &adapted1, &adapted2, k_max, 4)
            .map_err(|e| e.in_stage("bilinear"))?;
        out.constant("coeff-k-slope", "coefficient-kernel decay in the scale gap", coeff.k_slope);
        out.constant("coeff-m-slope", "coefficient-kernel decay in the offset", coeff.m_slope);
    }

    // Stage: weak boundedness for the suppressed operator.
    if config.verifier_active("wbp") {
        if antisymmetric_case {
            let rep = wbp_check(&op_phi, &good1, &good2, WbpMode::Antisymmetric, cap)
                .map_err(|e| e.in_stage("weak-boundedness"))?;
            out.check(
                "wbp-antisymmetric",
                "diagonal pairings cancel up to accumulation error",
                rep.worst_normalized_defect < 1e-10,
                format!("worst defect {}", rep.worst_normalized_defect),
            );
            out.constant("wbp-ratio", "worst normalized diagonal pairing", rep.worst_ratio);
        } else {
            let rep = wbp_check(&op_phi, &good1, &good2, WbpMode::SpecialOffdiag, cap)
                .map_err(|e| e.in_stage("weak-boundedness"))?;
            out.constant("wbp-ratio", "worst normalized diagonal pairing", rep.worst_ratio);
            out.constant("wbp-testing-term", "testing part of the diagonal chain", rep.worst_testing_term);
            out.constant("wbp-hardy-term", "collar part of the diagonal chain", rep.worst_hardy_term);
            out.constant("wbp-offdiag-term", "far part of the diagonal chain", rep.worst_offdiag_term);
        }
    }

    // Stage: reduced pairing bound for the suppressed operator.
    let s_prime = config.exponents.baby_s_prime();
    if config.verifier_active("baby") {
        let rep = baby_tb_bound(
            &op_phi,
            &good1,
            &good2,
            s_prime,
            config.samples.pairing_samples,
            config.seed ^ 0x800,
        )
        .map_err(|e| e.in_stage("reduced-bound"))?;
        out.constant(
            "suppressed-baby-tb",
            "worst normalized pairing of the suppressed operator",
            rep.worst_normalized_pairing,
        );
        out.constant(
            "suppressed-testing-route",
            "testing consequence of the reduced bound",
            rep.testing_route,
        );
    }

    // Stage: bounded test functions for the original operator.
    if config.verifier_active("final") {
        let s = s_prime / (s_prime - 1.0);
        let (bounded1, bounded2, worst_zero_fraction) = bounded_systems(
            &sys1,
            if antisymmetric_case { None } else { Some(&sys2) },
            &kernel,
            depth,
            &stopping_params,
            s,
        )
        .map_err(|e| e.in_stage("final"))?;
        out.constant(
            "bounded-system-zero-fraction",
            "worst fraction of a cube left uncovered by its profile",
            worst_zero_fraction,
        );
        let adj_op = op.adjoint();
        let mut worst_testing = 0.0f64;
        let mut worst_adjoint = 0.0f64;
        let mut sup_norm = 0.0f64;
        for q in DyadicCube::<D>::all(cap) {
            let b1 = bounded1.get(&q).expect("bounded system is full");
            let b2 = bounded2.get(&q).expect("bounded system is full");
            sup_norm = sup_norm.max(b1.linf_norm()).max(b2.linf_norm());
            let cells = b1.cube_cells(&q);
            let tb = op.apply(b1).map_err(|e| e.in_stage("final"))?;
            let tb2 = adj_op.apply(b2).map_err(|e| e.in_stage("final"))?;
            let n = cells.len() as f64;
            let avg1 = cells.iter().map(|&i| tb.values()[i].abs().powf(s)).sum::<f64>() / n;
            let avg2 = cells.iter().map(|&i| tb2.values()[i].abs().powf(s)).sum::<f64>() / n;
            worst_testing = worst_testing.max(avg1.powf(1.0 / s));
            worst_adjoint = worst_adjoint.max(avg2.powf(1.0 / s));
        }
        out.constant(
            "bounded-system-testing",
            "worst localized testing average of the constructed bounded system",
            worst_testing,
        );
        out.constant(
            "bounded-system-adjoint-testing",
            "same for the adjoint side",
            worst_adjoint,
        );
        out.constant("bounded-system-sup-norm", "sup norm of the bounded system", sup_norm);

        // Stopping-family extraction, then weak boundedness for the
        // original operator: the sparse restrictions carry governing
        // functions that genuinely extend beyond each cube.
        let (members1, tau1) = extract_sparse_family(&bounded1, &op, config.stopping.eta, s)
            .map_err(|e| e.in_stage("final"))?;
        let sparse1 = restrict_to_sparse(&bounded1, members1, tau1)
            .map_err(|e| e.in_stage("final"))?;
        let (members2, tau2) = extract_sparse_family(&bounded2, &adj_op, config.stopping.eta, s)
            .map_err(|e| e.in_stage("final"))?;
        let sparse2 = restrict_to_sparse(&bounded2, members2, tau2)
            .map_err(|e| e.in_stage("final"))?;
        out.constant("tau-final-extraction", "sparseness margin of the extracted family", tau1.min(tau2));

        let wbp = wbp_check(&op, &sparse1, &sparse2, WbpMode::AllCubes, cap)
            .map_err(|e| e.in_stage("final"))?;
        out.constant("wbp-allcubes-ratio", "diagonal pairing bound for the original operator", wbp.worst_ratio);
        out.constant(
            "wbp-allcubes-pointwise",
            "derived pointwise off-diagonal bound",
            wbp.worst_pointwise_offdiag,
        );

        let r_prime = {
            let t = sparse1.u.min(sparse2.u);
            (t / (t - 1.0)).max(2.0) + 1.0
        };
        let rep = baby_tb_bound(
            &op,
            &sparse1,
            &sparse2,
            r_prime,
            config.samples.pairing_samples,
            config.seed ^ 0x900,
        )
        .map_err(|e| e.in_stage("final"))?;
        out.constant(
            "final-baby-tb",
            "worst normalized pairing of the original operator",
            rep.worst_normalized_pairing,
        );

        // Indicator testing: the endpoint of the chain.
        let r = config.exponents.r;
        let mut worst_ind = 0.0f64;
        let mut worst_ind_adj = 0.0f64;
        for q in DyadicCube::<D>::all(cap) {
            let ind = GridFunction::<T, D>::indicator(depth, &q);
            let cells = ind.cube_cells(&q);
            let n = cells.len() as f64;
            let t_ind = op.apply(&ind).map_err(|e| e.in_stage("final"))?;
            let t_adj = adj_op.apply(&ind).map_err(|e| e.in_stage("final"))?;
            let avg = cells.iter().map(|&i| t_ind.values()[i].abs().powf(r)).sum::<f64>() / n;
            let avg_adj = cells.iter().map(|&i| t_adj.values()[i].abs().powf(r)).sum::<f64>() / n;
            worst_ind = worst_ind.max(avg.powf(1.0 / r));
            worst_ind_adj = worst_ind_adj.max(avg_adj.powf(1.0 / r));
        }
        out.constant("indicator-testing", "worst localized indicator testing constant", worst_ind);
        out.constant("indicator-testing-adjoint", "same for the adjoint", worst_ind_adj);
    }

    Ok(out)
}

/// Per-cube bounded test functions: run the stopping construction below each
/// cube, build the local suppression profile, and normalize the indicator of
/// the cube's zero set. Returns both sides and the worst covered fraction.
#[allow(clippy::type_complexity)]
fn bounded_systems<T: Real, const D: usize>(
    sys1: &AccretiveSystem<T, D>,
    sys2: Option<&AccretiveSystem<T, D>>,
    kernel: &CZKernel<T, D>,
    depth: u32,
    params: &StoppingParams,
    s: f64,
) -> Result<(AccretiveSystem<T, D>, AccretiveSystem<T, D>, f64)> {
    let mut assignment1 = BTreeMap::new();
    let mut assignment2 = BTreeMap::new();
    let mut worst_fraction = 0.0f64;
    for q in DyadicCube::<D>::all(depth) {
        let f1 = iterate_forest(sys1, kernel, &q, params)?;
        let mut bad = f1.all_bad_cubes();
        if let Some(s2) = sys2 {
            let f2 = iterate_forest(s2, &kernel.transpose(), &q, params)?;
            bad.extend(f2.all_bad_cubes());
            bad.sort();
            bad.dedup();
        }
        let phi = crate::kernels::SuppressionProfile::<T, D>::from_cubes(
            depth,
            params.suppression_power,
            bad,
        )?;
        let mut b = GridFunction::<T, D>::zeros(depth);
        let cells = b.cube_cells(&q);
        let zero_cells: Vec<usize> = cells
            .iter()
            .copied()
            .filter(|&i| phi.eval(&b.center_of_linear(i)) == T::zero())
            .collect();
        if zero_cells.is_empty() {
            return Err(Error::DegenerateSystem {
                context: format!("profile covers all of {}", q.label()),
            });
        }
        let covered = 1.0 - zero_cells.len() as f64 / cells.len() as f64;
        worst_fraction = worst_fraction.max(covered);
        let height = T::from_count(cells.len()) / T::from_count(zero_cells.len());
        for i in zero_cells {
            b.values_mut()[i] = height;
        }
        assignment1.insert(q, b.clone());
        assignment2.insert(q, b);
    }
    let mut b1 = AccretiveSystem::new(assignment1, depth, f64::INFINITY, s)?;
    b1.buffered = true;
    let mut b2 = AccretiveSystem::new(assignment2, depth, f64::INFINITY, s)?;
    b2.buffered = true;
    Ok((b1, b2, worst_fraction))
}

/// Standard stopping-time extraction from a bounded system on all cubes:
/// below each family member, stop at maximal cubes where the testing
/// average of the member's function blows up or its mean degenerates.
fn extract_sparse_family<T: Real, const D: usize>(
    sys: &AccretiveSystem<T, D>,
    op: &DiscreteOperator<T, D>,
    eta: f64,
    s: f64,
) -> Result<(Vec<DyadicCube<D>>, f64)> {
    let depth = sys.depth();
    let root = DyadicCube::<D>::root();
    let mut members = vec![root];
    let mut queue = vec![root];
    let mut tau = 1.0f64;
    let se = T::lit(s);
    let eta_t = T::lit(eta);
    while let Some(mcube) = queue.pop() {
        if mcube.level == depth {
            continue;
        }
        let b = sys.get(&mcube).ok_or_else(|| Error::MissingInput {
            context: format!("bounded system misses {}", mcube.label()),
        })?;
        let tb = op.apply(b)?;
        let sums_t = CubeSums::new(&tb.map(|v| v.abs().powf(se)));
        let sums_b = CubeSums::new(b);
        // Blow-up threshold: four times the member's own testing mass.
        let thr = sums_t.average(&mcube) * T::lit(4.0) + T::lit(1e-12);
        let mut stopped = Vec::new();
        let mut stack = mcube.children(depth).expect("non-leaf member");
        while let Some(q) = stack.pop() {
            let fires = sums_t.average(&q) > thr || sums_b.average(&q).abs() <= eta_t;
            if fires {
                stopped.push(q);
            } else if q.level < depth {
                stack.extend(q.children(depth).expect("level checked"));
            }
        }
        let fraction: f64 =
            stopped.iter().map(|c| c.volume::<f64>()).sum::<f64>() / mcube.volume::<f64>();
        if fraction >= 1.0 {
            return Err(Error::NoSparsenessMargin { cube: mcube.label() });
        }
        tau = tau.min(1.0 - fraction);
        for q in stopped {
            members.push(q);
            queue.push(q);
        }
    }
    members.sort();
    members.dedup();
    Ok((members, tau))
}
