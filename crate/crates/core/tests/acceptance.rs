//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines are
//! always printed.

use std::fs;
use std::path::Path;
use std::time::Instant;

use betagate::cells::{unroll, StackConfig, UnrollArgs, Variant};
use betagate::check::cell_gradcheck;
use betagate::data::{synthetic, write_idx_images, write_idx_labels, write_pianoroll_json};
use betagate::diagnostics::{
    self as diag, branch_point, gate_correlation, proposition_bounds, upper_bound_constant, verify_proposition,
    SweepReport,
};
use betagate::objectives::{kl_gamma, PriorSpec};
use betagate::run::{self, EvalSplit, Model, RunConfig, SyntheticSpec, Task};
use betagate::stochastic::{pathwise_grad_gamma, sample_gamma_value, NoiseSource, RngStream};
use betagate::tape::{gradcheck, BoundParams, ParamStore, PriorShape, Tape, TapeError, Tensor, Var};
use statrs::distribution::{ContinuousCDF, Gamma as GammaDist};
use statrs::function::gamma::ln_gamma;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_tensor(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()).unwrap()
}

/// Reduce an op output to a scalar with fixed, uneven weights.
fn probe(t: &mut Tape, v: Var) -> Result<Var, TapeError> {
    let n = t.value(v).len();
    t.weighted_sum(v, (0..n).map(|k| 0.3 + 0.17 * k as f64).collect())
}

type Build = Box<dyn Fn(&mut Tape, &BoundParams) -> Result<Var, TapeError>>;

fn primitive_cases() -> Vec<(&'static str, Build)> {
    let v = |b: &BoundParams, n: &str| b.var(n);
    let mut cases: Vec<(&'static str, Build)> = vec![
        ("matmul", Box::new(move |t, b| { let m = t.matmul(v(b, "a")?, v(b, "w")?)?; probe(t, m) })),
        ("add", Box::new(move |t, b| { let m = t.matmul(v(b, "a")?, v(b, "w")?)?; let s = t.add(m, v(b, "bias")?)?; probe(t, s) })),
        ("sub", Box::new(move |t, b| { let s = t.sub(v(b, "a")?, v(b, "p")?)?; probe(t, s) })),
        ("mul", Box::new(move |t, b| { let s = t.mul(v(b, "a")?, v(b, "p")?)?; probe(t, s) })),
        ("div", Box::new(move |t, b| { let s = t.div(v(b, "a")?, v(b, "p")?)?; probe(t, s) })),
        ("affine", Box::new(move |t, b| { let s = t.affine(v(b, "a")?, -1.7, 0.3)?; probe(t, s) })),
        ("scale", Box::new(move |t, b| { let s = t.scale(v(b, "a")?, 2.5)?; probe(t, s) })),
        ("one_minus", Box::new(move |t, b| { let s = t.one_minus(v(b, "a")?)?; probe(t, s) })),
        ("sigmoid", Box::new(move |t, b| { let s = t.sigmoid(v(b, "a")?)?; probe(t, s) })),
        ("tanh", Box::new(move |t, b| { let s = t.tanh(v(b, "a")?)?; probe(t, s) })),
        ("softplus", Box::new(move |t, b| { let s = t.softplus(v(b, "a")?)?; probe(t, s) })),
        ("relu", Box::new(move |t, b| { let s = t.relu(v(b, "p")?)?; probe(t, s) })),
        ("exp", Box::new(move |t, b| { let s = t.exp(v(b, "a")?)?; probe(t, s) })),
        ("ln", Box::new(move |t, b| { let s = t.ln(v(b, "p")?)?; probe(t, s) })),
        ("concat", Box::new(move |t, b| { let s = t.concat(&[v(b, "a")?, v(b, "p")?])?; probe(t, s) })),
        ("slice", Box::new(move |t, b| { let s = t.slice(v(b, "a")?, 1, 2)?; probe(t, s) })),
        ("sum", Box::new(move |t, b| { let s = t.mul(v(b, "a")?, v(b, "a")?)?; t.sum(s) })),
        ("mean", Box::new(move |t, b| { let s = t.mul(v(b, "a")?, v(b, "p")?)?; t.mean(s) })),
        ("add_n", Box::new(move |t, b| { let s = t.add_n(&[v(b, "a")?, v(b, "p")?, v(b, "a")?])?; probe(t, s) })),
        ("weighted_sum", Box::new(move |t, b| { let s = t.tanh(v(b, "a")?)?; t.weighted_sum(s, (0..12).map(|k| k as f64 - 5.0).collect()) })),
        ("gather_rows", Box::new(move |t, b| { let s = t.gather_rows(v(b, "w")?, &[3, 0, 3, 1])?; probe(t, s) })),
        ("select_rows", Box::new(move |t, b| { let s = t.select_rows(&[true, false, true], v(b, "a")?, v(b, "p")?)?; probe(t, s) })),
        ("kl_gamma", Box::new(move |t, b| { let q = t.softplus(v(b, "a")?)?; let s = t.kl_gamma(q, PriorShape::Const(1.3), 0.7)?; probe(t, s) })),
        ("kl_gamma_node_prior", Box::new(move |t, b| {
            let q = t.softplus(v(b, "a")?)?;
            let s = t.kl_gamma(q, PriorShape::Node(v(b, "p")?), 1.2)?;
            probe(t, s)
        })),
        ("rbf_shape", Box::new(move |t, b| {
            let s = t.rbf_shape(vec![0.0, 0.7, 2.0], 4, v(b, "ll")?, v(b, "ls")?)?;
            probe(t, s)
        })),
        ("softmax_ce_rows", Box::new(move |t, b| { let s = t.softmax_ce_rows(v(b, "a")?, &[2, 0, 3])?; probe(t, s) })),
        ("bce_logits_rows", Box::new(move |t, b| {
            let y = Tensor::matrix(3, 4, (0..12).map(|k| (k % 2) as f64).collect()).unwrap();
            let s = t.bce_logits_rows(v(b, "a")?, &y)?;
            probe(t, s)
        })),
    ];
    cases.sort_by_key(|c| c.0);
    cases
}

fn primitive_params() -> ParamStore {
    let mut rng = RngStream::new(101, 0);
    let mut p = ParamStore::new();
    p.insert("a", rand_tensor(&mut rng, &[3, 4], -1.5, 1.5));
    p.insert("p", rand_tensor(&mut rng, &[3, 4], 0.5, 2.0));
    p.insert("w", rand_tensor(&mut rng, &[4, 2], -1.0, 1.0));
    p.insert("bias", rand_tensor(&mut rng, &[2], -1.0, 1.0));
    p.insert("ll", Tensor::scalar(0.2));
    p.insert("ls", Tensor::scalar(-0.3));
    p
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let p = primitive_params();
    let mut worst = (String::new(), 0.0f64);
    for (name, build) in primitive_cases() {
        // each case only uses some parameters; unused ones have zero gradient both ways
        let gc = gradcheck::check(&p, 1e-6, 0, &mut RngStream::new(1, 1), |t, b| build(t, b));
        match gc {
            Ok(g) if g.max_rel_err() > worst.1 => worst = (name.to_string(), g.max_rel_err()),
            Ok(_) => {}
            Err(e) => return outcome(false, format!("{name}: {e}")),
        }
    }
    // stochastic primitive under common random numbers
    let gamma_build = |t: &mut Tape, b: &BoundParams, n: &mut NoiseSource| -> Result<Var, TapeError> {
        let a = t.softplus(b.var("a")?)?;
        let u = t.gamma(a, n)?;
        let d = t.add(u, b.var("p")?)?;
        let r = t.div(u, d)?;
        probe(t, r)
    };
    let mut rec = NoiseSource::recording(RngStream::new(5, 5));
    let mut t = Tape::new();
    let b = p.bind(&mut t).unwrap();
    gamma_build(&mut t, &b, &mut rec).unwrap();
    let log = rec.into_log().unwrap();
    let gamma = gradcheck::check(&p, 1e-5, 0, &mut RngStream::new(1, 2), |t, b| {
        gamma_build(t, b, &mut NoiseSource::replay(log.clone()))
    })
    .map(|g| g.max_rel_err())
    .unwrap_or(f64::INFINITY);

    let (mut det_worst, mut sto_worst) = (0.0f64, 0.0f64);
    for v in Variant::ALL {
        det_worst = det_worst.max(cell_gradcheck(v, false).unwrap_or(f64::INFINITY));
        if v.is_stochastic() {
            sto_worst = sto_worst.max(cell_gradcheck(v, true).unwrap_or(f64::INFINITY));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.1 <= 1e-4 && det_worst <= 1e-4 && gamma <= 2e-2 && sto_worst <= 2e-2 && secs < 120.0;
    outcome(
        pass,
        format!(
            "primitives max rel err {:.2e} ({}), gamma node {gamma:.2e}, cells mean-mode {det_worst:.2e}, cells sampled {sto_worst:.2e}, {secs:.1}s",
            worst.1, worst.0
        ),
    )
}

/// Bisection on statrs' CDF; its own inverse is unreliable for small shapes.
fn gamma_quantile(shape: f64, q: f64) -> f64 {
    let d = GammaDist::new(shape, 1.0).unwrap();
    let (mut lo, mut hi) = (0.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d.cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for a in [0.3, 0.5, 1.0, 2.0, 8.0] {
        for q in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let quantile = |shape: f64| gamma_quantile(shape, q);
            let h = 1e-5;
            let fd = (quantile(a + h) - quantile(a - h)) / (2.0 * h);
            let g = pathwise_grad_gamma(a, quantile(a)).unwrap();
            worst = worst.max((g - fd).abs() / fd.abs());
        }
    }
    outcome(worst <= 1e-2, format!("max rel err vs inverse-CDF differences {worst:.2e} (limit 1e-2)"))
}

fn criterion_3() -> Outcome {
    let n = 100_000;
    let mut details = Vec::new();
    let mut pass = true;
    for (k, a) in [0.5, 1.0, 2.0, 5.0].into_iter().enumerate() {
        let mut rng = RngStream::new(303, k as u64);
        let xs: Vec<f64> = (0..n).map(|_| sample_gamma_value(a, &mut rng).unwrap()).collect();
        let nf = n as f64;
        let m = xs.iter().sum::<f64>() / nf;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0);
        let zm = (m - a).abs() / (a / nf).sqrt();
        let zv = (v - a).abs() / ((2.0 * a * a + 6.0 * a) / nf).sqrt();
        pass &= zm <= 3.0 && zv <= 3.0;
        details.push(format!("a={a}: z_mean {zm:.2} z_var {zv:.2}"));
    }
    let mut rng = RngStream::new(303, 9);
    let mut xs: Vec<f64> = (0..n).map(|_| sample_gamma_value(1.0, &mut rng).unwrap()).collect();
    xs.sort_by(f64::total_cmp);
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = 1.0 - (-x).exp();
            (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
        })
        .fold(0.0, f64::max);
    let crit = 1.94947 / (n as f64).sqrt();
    pass &= ks < crit;
    details.push(format!("KS vs Exp(1) {ks:.5} (critical {crit:.5})"));
    outcome(pass, details.join("; "))
}

/// ln pdf of Gamma(shape, rate) from statrs' log-gamma.
fn ln_pdf(shape: f64, rate: f64, u: f64) -> f64 {
    shape * rate.ln() + (shape - 1.0) * u.ln() - rate * u - ln_gamma(shape)
}

fn kl_oracle(q: f64, p: f64, rate: f64) -> f64 {
    // Simpson in y = ln u
    let f = |y: f64| {
        let u = y.exp();
        let lq = ln_pdf(q, 1.0, u);
        lq.exp() * u * (lq - ln_pdf(p, rate, u))
    };
    let (lo, hi, n) = (-90.0, 250f64.ln(), 60_000);
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + k as f64 * h);
    }
    acc * h / 3.0
}

fn criterion_4() -> Outcome {
    let grid = [0.5, 1.0, 2.0, 5.0];
    let mut worst = 0.0f64;
    for q in grid {
        for p in grid {
            for rate in [0.5, 1.0, 2.0] {
                worst = worst.max((kl_gamma(q, p, rate).unwrap() - kl_oracle(q, p, rate)).abs());
            }
        }
    }
    let eq = grid.iter().map(|&a| kl_gamma(a, a, 1.0).unwrap().abs()).fold(0.0, f64::max);
    outcome(worst <= 1e-6 && eq <= 1e-12, format!("max |closed form - quadrature| {worst:.2e} (limit 1e-6); KL at equality {eq:.1e}"))
}

fn criterion_5() -> Outcome {
    let mut outside = 0usize;
    let mut cifg_exact = true;
    for v in Variant::ALL {
        let cfg = StackConfig::new(v, 3, 8);
        let mut p = ParamStore::new();
        cfg.init_params(&mut p, &mut RngStream::new(55, 0)).unwrap();
        let mut rng = RngStream::new(55, 1);
        let xs: Vec<Tensor> = (0..6).map(|_| rand_tensor(&mut rng, &[16, 3], -3.0, 3.0)).collect();
        for noise in [NoiseSource::Mean, NoiseSource::Sample(RngStream::new(55, 2))] {
            let mut noise = noise;
            let mut t = Tape::new();
            let b = p.bind(&mut t).unwrap();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone()).unwrap()).collect();
            let spec = PriorSpec::default();
            let args = UnrollArgs { lengths: None, prior: v.has_prior().then_some(&spec), dist2: None };
            let u = unroll(&cfg, &mut t, &b, &vars, &mut noise, args).unwrap();
            for tr in u.traces.iter().flatten() {
                for g in [tr.i, tr.f, tr.o] {
                    outside += t.value(g).data().iter().filter(|&&x| !(x > 0.0 && x < 1.0)).count();
                }
                if v == Variant::Cifg {
                    cifg_exact &= t.value(tr.i).data().iter().zip(t.value(tr.f).data()).all(|(i, f)| i + f == 1.0);
                }
            }
        }
    }
    let mut rng = RngStream::new(56, 0);
    let bl = gate_correlation(Variant::Blstm, &[0.8, 1.7, 2.5, 0.6], 10_000, &mut rng).unwrap();
    let (blr, blse) = (bl.rho.unwrap(), bl.se.unwrap());
    let g3 = gate_correlation(Variant::Bblstm3g, &[1.0, 1.0, 1.0], 10_000, &mut rng).unwrap();
    let (g3r, g3se) = (g3.rho.unwrap(), g3.se.unwrap());
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/correlation_sweep.json");
    let sweep: SweepReport = serde_json::from_str(&fs::read_to_string(&fixture).unwrap()).unwrap();
    let lo = gate_correlation(Variant::Bblstm5g, &sweep.min.shapes, 10_000, &mut rng).unwrap().rho.unwrap();
    let hi = gate_correlation(Variant::Bblstm5g, &sweep.max.shapes, 10_000, &mut rng).unwrap().rho.unwrap();
    let pass = outside == 0
        && cifg_exact
        && blr.abs() <= 3.0 * blse
        && g3r >= -3.0 * g3se
        && lo <= -0.2
        && hi >= 0.2
        && (lo - sweep.min.rho).abs() <= 0.05
        && (hi - sweep.max.rho).abs() <= 0.05;
    outcome(
        pass,
        format!(
            "gates outside (0,1): {outside}; CIFG i+f=1 exact: {cifg_exact}; BLSTM rho {blr:.4} (3SE {:.4}); 3G rho {g3r:.4}; 5G fixtures rho {lo:.3} (stored {:.3}) and {hi:.3} (stored {:.3})",
            3.0 * blse,
            sweep.min.rho,
            sweep.max.rho
        ),
    )
}

/// Exact `S₁(p/q)` as a reduced fraction.
fn s1_rational(p: i128, q: i128) -> (i128, i128) {
    let num = -(36125 * p * p - 107780 * p * q - 214200 * q * q);
    let den = 38880 * (4 * q + p) * (4 * q + p);
    let g = gcd(num.abs(), den);
    (num / g, den / g)
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn criterion_6() -> Outcome {
    let mut lines = Vec::new();
    let mut exact = true;
    // bound formulas against exact rational evaluation
    for (p, q) in [(1i128, 1000i128), (1, 200), (8, 1167), (1, 10)] {
        let (n, d) = s1_rational(p, q);
        let (_, s1) = proposition_bounds(p as f64 / q as f64);
        exact &= ((s1 - n as f64 / d as f64) / s1).abs() < 1e-14;
        let s0_exact = -(36125.0 * (p * p) as f64 + 107780.0 * (p * q) as f64 - 214200.0 * (q * q) as f64)
            / (38880.0 * ((4 * q - p) * (4 * q - p)) as f64);
        let (s0, _) = proposition_bounds(p as f64 / q as f64);
        exact &= ((s0 - s0_exact) / s0).abs() < 1e-14;
    }
    let (s0z, s1z) = proposition_bounds(0.0);
    let limit = 214200.0 / (38880.0 * 16.0);
    exact &= (s0z - limit).abs() < 1e-15 && (s1z - limit).abs() < 1e-15;
    let (n, d) = s1_rational(8, 1167);
    let constant_exact = (n, d) == (6260063, 18180288);
    let (_, s1b) = proposition_bounds(branch_point());
    let continuity = ((s1b - upper_bound_constant()) / upper_bound_constant()).abs();
    lines.push(format!(
        "formulas exact: {exact}; S1(8/1167) = {n}/{d} (constant reproduced: {constant_exact}); continuity rel {continuity:.1e}"
    ));
    let reps = verify_proposition(&[0.001, 0.005, branch_point()], 10_000, &RngStream::new(66, 0)).unwrap();
    let mut contained = true;
    for r in &reps {
        let rate = r.containment_rate.unwrap_or(0.0);
        contained &= rate >= 0.95 && !r.sampling_failure;
        lines.push(format!(
            "delta {:.5}: [S0, upper] = [{:.6}, {:.6}], mean derivative {:.6} (range {:.6}..{:.6}), in-band draws contained {:.1}% (target 95%), mean contained {}",
            r.delta,
            r.s0,
            r.upper,
            r.mean_derivative.unwrap_or(f64::NAN),
            r.min_derivative.unwrap_or(f64::NAN),
            r.max_derivative.unwrap_or(f64::NAN),
            100.0 * rate,
            r.mean_contained.unwrap_or(false)
        ));
    }
    if !contained {
        lines.push("containment target missed: every sampled derivative lies below S0".into());
    }
    outcome(exact && constant_exact && continuity <= 1e-6 && contained, lines.join("\n    "))
}

fn synthetic_cfg(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        variant: Variant::Bblstm5g,
        task: Task::Synthetic,
        hidden: 32,
        epochs: 50,
        train_metric: true,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.adam.lr = 0.01;
    cfg
}

fn criterion_7(dir: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;

    // (a) synthetic two-regime task
    let start = Instant::now();
    let s = run::train(&synthetic_cfg(&dir.join("synthetic"))).unwrap();
    let hit = s.history.iter().find(|m| m.train_metric.unwrap_or(0.0) >= 0.95).map(|m| m.epoch);
    let best = s.history.iter().filter_map(|m| m.train_metric).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    pass &= hit.is_some() && secs < 900.0;
    lines.push(format!("(a) bblstm5g synthetic: best train accuracy {best:.3}, first >= 0.95 at epoch {}, {secs:.0}s", hit.map_or("never".into(), |e| e.to_string())));

    // (b) piano rolls
    let rolls = synthetic::chorales(200, 16, 48, 5);
    let rolls_path = dir.join("chorales.json");
    write_pianoroll_json(&rolls_path, &rolls).unwrap();
    for v in Variant::ALL {
        let start = Instant::now();
        let mut cfg = RunConfig {
            variant: v,
            task: Task::Music,
            hidden: 32,
            batch_size: 16,
            epochs: 15,
            out_dir: dir.join(format!("music-{v}")),
            ..RunConfig::default()
        };
        cfg.data.train = Some(rolls_path.clone());
        cfg.adam.lr = 0.01;
        let r = run::train(&cfg);
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(s) => {
                let first = s.history[0].valid_metric;
                let best = s.history.iter().map(|m| m.valid_metric).fold(f64::INFINITY, f64::min);
                let gain = (first - best) / first;
                let finite = s.history.iter().all(|m| m.valid_metric.is_finite() && m.train_loss.is_finite());
                let kl_ok = v != Variant::Bblstm5gp || s.history.iter().all(|m| m.kl.is_finite() && m.kl > 0.0);
                let ok = gain >= 0.15 && finite && kl_ok && secs < 900.0;
                pass &= ok;
                let kl = if v == Variant::Bblstm5gp {
                    format!(", KL {:.2} -> {:.2}", s.history[0].kl, s.history.last().unwrap().kl)
                } else {
                    String::new()
                };
                lines.push(format!(
                    "(b) {v}: valid frame NLL {first:.3} -> best {best:.3} ({:.1}% better){kl}, {secs:.0}s{}",
                    100.0 * gain,
                    if ok { "" } else { " FAILED" }
                ));
            }
            Err(e) => {
                pass = false;
                lines.push(format!("(b) {v}: {e}"));
            }
        }
    }

    // (c) two-digit images, one pixel per step
    let (train_img, train_lab) = synthetic::digit_images(2000, 11);
    let (test_img, test_lab) = synthetic::digit_images(500, 12);
    let files = ["train-img.idx", "train-lab.idx", "test-img.idx", "test-lab.idx"].map(|f| dir.join(f));
    write_idx_images(&files[0], 28, 28, &train_img).unwrap();
    write_idx_labels(&files[1], &train_lab).unwrap();
    write_idx_images(&files[2], 28, 28, &test_img).unwrap();
    write_idx_labels(&files[3], &test_lab).unwrap();
    for (v, epochs) in [(Variant::Lstm, 3), (Variant::Bblstm5g, 2)] {
        let start = Instant::now();
        let mut cfg = RunConfig {
            variant: v,
            task: Task::Mnist,
            hidden: 64,
            batch_size: 16,
            epochs,
            forget_bias: 4.0,
            input_bias: -4.0,
            digits: vec![0, 1],
            out_dir: dir.join(format!("mnist-{v}")),
            ..RunConfig::default()
        };
        cfg.adam.lr = 0.005;
        cfg.data.train_images = Some(files[0].clone());
        cfg.data.train_labels = Some(files[1].clone());
        cfg.data.test_images = Some(files[2].clone());
        cfg.data.test_labels = Some(files[3].clone());
        let acc = run::train(&cfg)
            .and_then(|_| run::evaluate(&cfg, &cfg.out_dir.join("best.ckpt"), Some(EvalSplit::Test)))
            .map(|r| r.mean);
        let secs = start.elapsed().as_secs_f64();
        match acc {
            Ok(a) => {
                pass &= a >= 0.98 && secs < 900.0;
                lines.push(format!("(c) {v}: test accuracy {a:.4} after {epochs} epochs, {secs:.0}s"));
            }
            Err(e) => {
                pass = false;
                lines.push(format!("(c) {v}: {e}"));
            }
        }
    }
    outcome(pass, lines.join("\n    "))
}

fn criterion_8(dir: &Path) -> Outcome {
    let cfg = RunConfig {
        hidden: 8,
        epochs: 1,
        synthetic: SyntheticSpec { train: 32, valid: 16, test: 16, length: 12, seed: 4 },
        out_dir: dir.join("diag"),
        ..RunConfig::default()
    };
    run::train(&cfg).unwrap();
    let data = run::load_task_data(&cfg).unwrap();
    let (model, params) = run::load_model(&cfg, &data, &cfg.out_dir.join("best.ckpt")).unwrap();
    let batch = data.valid.batch(&[0, 1, 2, 3]);
    let g = diag::gradient_norm_trace(&model, &params, &batch, &mut NoiseSource::Sample(RngStream::new(8, 8))).unwrap();
    let trace_ok = g.norms.len() == 12 && g.norms.iter().all(|n| n.is_finite());

    // forced-closed forget gate, no recurrent path: decay bounded by max f
    let mut stack = StackConfig::new(Variant::Lstm, 1, 6);
    stack.forget_bias = -30.0;
    let closed = Model { stack, task: Task::Mnist, vocab: 0, outputs: 2, embed_dim: 1, prior: PriorSpec::default(), features: None };
    let mut p = closed.init_params(2).unwrap();
    let w = p.get_mut("layer0.w").unwrap();
    let cols = w.cols();
    w.data_mut()[cols..].fill(0.0);
    let mut rng = RngStream::new(9, 0);
    let inputs = (0..12).map(|_| rand_tensor(&mut rng, &[4, 1], 0.0, 1.0)).collect();
    let pix = run::Batch::Pixels { inputs, labels: vec![0, 1, 0, 1] };
    let d = diag::gradient_norm_trace(&closed, &p, &pix, &mut NoiseSource::Mean).unwrap();
    let decay_ok = d.norms[11] > 0.0 && d.decays_geometrically(d.max_forget * (1.0 + 1e-9));

    let hist = || {
        let gates = diag::collect_gates(&model, &params, &data.valid, 8, |b| {
            NoiseSource::Sample(RngStream::new(3, 0).split(b as u64))
        })
        .unwrap();
        [&gates.i, &gates.f, &gates.o].map(|v| diag::gate_histogram(v, 10).unwrap().to_csv()).join("\n")
    };
    let corr = || diag::step_correlations_csv(&diag::sequence_correlation(&model, &params, &data.valid.batch(&[0]), 0, 1000, 5).unwrap());
    let csv_ok = hist() == hist() && corr() == corr();
    outcome(
        trace_ok && decay_ok && csv_ok,
        format!(
            "trace has {} finite values for T=12: {trace_ok}; closed-gate decay (max f {:.1e}) geometric: {decay_ok}; histogram and correlation CSVs repeat: {csv_ok}",
            g.norms.len(),
            d.max_forget
        ),
    )
}

fn criterion_9(dir: &Path) -> Outcome {
    let mut same = Vec::new();
    for v in [Variant::Bblstm5gp, Variant::G2Lstm, Variant::Lstm] {
        let files: Vec<Vec<u8>> = ["a", "b"]
            .iter()
            .map(|tag| {
                let cfg = RunConfig {
                    variant: v,
                    hidden: 8,
                    epochs: 3,
                    synthetic: SyntheticSpec { train: 64, valid: 16, test: 16, length: 10, seed: 2 },
                    out_dir: dir.join(format!("det-{v}-{tag}")),
                    ..RunConfig::default()
                };
                run::train(&cfg).unwrap();
                fs::read(cfg.out_dir.join("metrics.jsonl")).unwrap()
            })
            .collect();
        same.push((v, files[0] == files[1] && !files[0].is_empty()));
    }
    let pass = same.iter().all(|s| s.1);
    outcome(pass, same.iter().map(|(v, ok)| format!("{v} identical: {ok}")).collect::<Vec<_>>().join(", "))
}

fn main() {
    // libtest-style flags (`--list`, filters) are accepted and ignored,
    // except that listing must not run the suite.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient correctness", Box::new(criterion_1)),
        ("pathwise Gamma gradient", Box::new(criterion_2)),
        ("sampler statistics", Box::new(criterion_3)),
        ("Gamma KL", Box::new(criterion_4)),
        ("gate invariants", Box::new(criterion_5)),
        ("input-gate derivative bounds", Box::new(criterion_6)),
        ("training sanity", Box::new(|| criterion_7(dir.path()))),
        ("diagnostics fidelity", Box::new(|| criterion_8(dir.path()))),
        ("determinism", Box::new(|| criterion_9(dir.path()))),
    ];
    // ACCEPTANCE_CRITERIA=1,6 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let (mut failed, mut ran) = (0, 0);
    for (k, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(k + 1))) {
            continue;
        }
        ran += 1;
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {} {:<4} {name}: {}", k + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
