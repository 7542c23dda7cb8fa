//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the test fails if any hard criterion fails. Run with
//! `cargo test -p microvit-core --test acceptance -- --nocapture`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use microvit_core::bench::{compute_energy, compute_eta, energy_per_image, run_bench, BenchConfig, PowerProvider, Stop};
use microvit_core::blocks::{sdta_attention, sdta_split, Mode, RepDwBlock, SdtaBlock};
use microvit_core::fusion::RepBranchSpec;
use microvit_core::grad::check_recorded;
use microvit_core::init::{rep_branch, BranchShape, Init};
use microvit_core::model::{count, random_input};
use microvit_core::tensor::{batchnorm_infer, conv2d, softmax, BnSpec, ConvSpec, Matrix, Tensor};
use microvit_core::{io, Attention, Model32, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("took {:.1}s, budget {limit_s}s", elapsed.as_secs_f64())
    })
}

fn max_diff<T: Copy + Into<f64>>(a: &[T], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x.into() - y).abs()).fold(0.0, f64::max)
}

// Brute-force oracles, written independently of the engine kernels.

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize, groups: usize) -> Vec<f64> {
    let [n, c, h, wd] = x.shape();
    let [oc, cin_g, kh, kw] = w.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let oc_g = oc / groups;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..cin_g {
                        let ic = (o / oc_g) * cin_g + i;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at([o, i, ky, kx]) * x.at([b, ic, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out[((b * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    debug_assert_eq!(c % groups, 0);
    out
}

fn bn_oracle(x: &[f64], shape: [usize; 4], bn: &BnSpec<f64>) -> Vec<f64> {
    let plane = shape[2] * shape[3];
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / plane) % shape[1];
            bn.gamma[c] * (v - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() + bn.beta[c]
        })
        .collect()
}

/// Branch-sum forward of a train-form unit from its raw arrays.
fn branch_oracle(spec: &RepBranchSpec<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let conv_bn = |conv: &ConvSpec<f64>, bn: &BnSpec<f64>| {
        let y = conv_oracle(x, conv.weight(), conv.bias(), conv.stride(), conv.padding(), conv.groups());
        let [n, _, h, w] = x.shape();
        let (oh, ow) = conv.output_hw(h, w).unwrap();
        bn_oracle(&y, [n, conv.out_channels(), oh, ow], bn)
    };
    let mut y = conv_bn(&spec.main().conv, &spec.main().bn);
    if let Some(s) = spec.scale() {
        for (a, b) in y.iter_mut().zip(conv_bn(&s.conv, &s.bn)) {
            *a += b;
        }
    }
    if let Some(bn) = spec.identity() {
        for (a, b) in y.iter_mut().zip(bn_oracle(x.data(), x.shape(), bn)) {
            *a += b;
        }
    }
    y
}

fn softmax_oracle(m: &Matrix<f64>, axis: usize) -> Vec<f64> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let lane: Vec<f64> = if axis == 1 {
                (0..c).map(|k| m.at(i, k)).collect()
            } else {
                (0..r).map(|k| m.at(k, j)).collect()
            };
            let denom: f64 = lane.iter().map(|v| v.exp()).sum();
            out[i * c + j] = m.at(i, j).exp() / denom;
        }
    }
    out
}

fn random_branch(rng: &mut ChaCha8Rng) -> (BranchShape, usize, usize) {
    let depthwise = rng.random_bool(0.5);
    let stride = if rng.random_bool(0.5) { 1 } else { 2 };
    let cin = rng.random_range(1..=6);
    let cout = if depthwise { cin } else { rng.random_range(1..=6) };
    let shape = BranchShape {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride,
        groups: if depthwise { cin } else { 1 },
        scale: rng.random_bool(0.5),
        identity: stride == 1 && cin == cout && rng.random_bool(0.6),
    };
    (shape, rng.random_range(3..=9), rng.random_range(3..=9))
}

fn fusion_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut kinds = std::collections::HashSet::new();
    for _ in 0..100 {
        let (shape, h, w) = random_branch(&mut rng);
        kinds.insert((shape.groups > 1, shape.stride, shape.scale, shape.identity));
        let spec64: RepBranchSpec<f64> = rep_branch(shape, 1e-5, Init::Randomized, &mut rng).map_err(|e| e.to_string())?;
        let x64 = Tensor::<f64>::randn([2, shape.in_channels, h, w], 1.0, &mut rng);

        let fused64 = conv2d(&x64, &spec64.fuse().unwrap()).unwrap();
        worst64 = worst64.max(max_diff(fused64.data(), &branch_oracle(&spec64, &x64)));

        let spec32 = spec64.cast::<f32>();
        let x32 = x64.cast::<f32>();
        let fused32 = conv2d(&x32, &spec32.fuse().unwrap()).unwrap();
        let train32 = spec32.forward(&x32).unwrap().cast::<f64>();
        worst32 = worst32.max(max_diff(fused32.data(), train32.data()));
    }
    ensure(worst32 < 1e-4, || format!("32-bit max |Δ| {worst32:.3e}"))?;
    ensure(worst64 < 1e-10, || format!("64-bit max |Δ| {worst64:.3e}"))?;
    ensure(kinds.len() >= 8, || format!("only {} branch configurations covered", kinds.len()))?;
    within(start.elapsed(), 60)?;
    Ok(format!(
        "100 specs, {} configurations, max |Δ| {worst32:.2e} (f32) {worst64:.2e} (f64)",
        kinds.len()
    ))
}

fn deploy_equivalence() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for v in Variant::ALL {
        let train = Model32::build(&v.config(), 7).map_err(|e| e.to_string())?;
        let deploy = train.deploy().map_err(|e| e.to_string())?;
        let x = random_input::<f32>([5, 3, 224, 224], 1000 + v as u64);
        let a = train.forward(&x).map_err(|e| e.to_string())?;
        let b = deploy.forward(&x).map_err(|e| e.to_string())?;
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max);
        ensure(d < 1e-3, || format!("{v}: max |Δ| {d:.3e}"))?;
        ensure(deploy.param_count() < train.param_count(), || {
            format!("{v}: deploy {} !< train {}", deploy.param_count(), train.param_count())
        })?;
        notes.push(format!("{v} {d:.1e} ({} -> {})", train.param_count(), deploy.param_count()));
    }
    within(start.elapsed(), 300)?;
    Ok(notes.join(", "))
}

fn cost_reconstruction() -> Outcome {
    let deploy = |v: Variant, a: Attention| count(&v.config().with_attention(a), Mode::Deploy, 224).unwrap();
    let [s1, s2, s3] = Variant::ALL.map(|v| deploy(v, Attention::Sdta));
    let s2_mdta = deploy(Variant::S2, Attention::Mdta);
    let rel = |x: u64, target: f64| x as f64 / target - 1.0;
    ensure(rel(s1.total_params, 6.7e6).abs() <= 0.10, || format!("S1 params {}", s1.total_params))?;
    ensure(rel(s1.total_macs, 250e6).abs() <= 0.10, || format!("S1 MACs {}", s1.total_macs))?;
    ensure(s1.total_params < s2.total_params && s2.total_params < s3.total_params, || "param ordering".into())?;
    ensure(s1.total_macs < s2.total_macs && s2.total_macs < s3.total_macs, || "MAC ordering".into())?;
    ensure(s2_mdta.total_macs > s2.total_macs, || {
        format!("MDTA S2 {} !> SDTA S2 {}", s2_mdta.total_macs, s2.total_macs)
    })?;
    // The analytic count must agree with an instantiated model.
    let built = Model32::build(&Variant::S1.config(), 1).unwrap().deploy().unwrap();
    ensure(built.param_count() as u64 == s1.total_params, || {
        format!("S1 analytic {} vs instantiated {}", s1.total_params, built.param_count())
    })?;
    for (name, r, params, macs) in [("S2", &s2, 12.7e6, 407e6), ("S3", &s3, 17.0e6, 676e6)] {
        println!(
            "    {name}: params {:.2} M ({:+.1}% vs {:.1} M), MACs {:.1} M ({:+.1}% vs {:.0} M)",
            r.total_params as f64 / 1e6,
            100.0 * rel(r.total_params, params),
            params / 1e6,
            r.total_macs as f64 / 1e6,
            100.0 * rel(r.total_macs, macs),
            macs / 1e6
        );
    }
    Ok(format!(
        "S1 {:.2} M params ({:+.1}%), {:.1} M MACs ({:+.1}%); S2 MDTA {:.1} M > SDTA {:.1} M",
        s1.total_params as f64 / 1e6,
        100.0 * rel(s1.total_params, 6.7e6),
        s1.total_macs as f64 / 1e6,
        100.0 * rel(s1.total_macs, 250e6),
        s2_mdta.total_macs as f64 / 1e6,
        s2.total_macs as f64 / 1e6
    ))
}

fn energy_arithmetic() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 0.015 * b;
    let mut out = Vec::new();
    for (watts, thr, acc, e_ref, eta_ref) in [(25.8, 2367.6, 72.7, 10.8, 6.67), (28.0, 1883.3, 75.1, 14.9, 5.04)] {
        let e = energy_per_image(watts, thr).map_err(|e| e.to_string())?;
        // Same figure through the latency form, 64-image batches.
        let via_latency = compute_energy(&[64.0 / thr; 4], 64, watts).map_err(|e| e.to_string())?;
        let eta = compute_eta(acc, e).map_err(|e| e.to_string())?;
        ensure(close(e, e_ref), || format!("E_img {e:.3} vs {e_ref}"))?;
        ensure((via_latency - e).abs() <= 1e-9 * e, || format!("latency form {via_latency} vs {e}"))?;
        ensure(close(eta, eta_ref), || format!("eta {eta:.3} vs {eta_ref}"))?;
        out.push(format!("{watts} W @ {thr} img/s -> {e:.2} mJ, eta {eta:.2}"));
    }
    Ok(out.join("; "))
}

fn sdta_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for (c, hw) in [(8, 4), (16, 7), (32, 2), (320, 4)] {
        let block = SdtaBlock::<f32>::random(c, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let x = Tensor::<f32>::randn([2, c, hw, hw], 1.0, &mut rng);
        for m in block.attention_maps(&x, Mode::Train).unwrap() {
            for j in 0..m.cols() {
                let s: f64 = (0..m.rows()).map(|i| m.at(i, j) as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("column sum off by {worst:.2e}"))?;

    let c = 8;
    let p = Tensor::<f32>::randn([1, c + 32, 1, 1], 3.0, &mut rng);
    let (cat, _) = sdta_attention(&p, c).unwrap();
    let v = &p.data()[32..32 + c / 4];
    ensure(&cat.data()[..c / 4] == v, || "H=W=1 attention output differs from V".into())?;

    for c in [320, 448] {
        let split = sdta_split(c).unwrap();
        ensure(split == [16, 16, c / 4, 3 * c / 4], || format!("split {split:?} for C={c}"))?;
        let block = SdtaBlock::<f32>::random(c, 2, 1e-5, Init::Fresh, &mut rng).unwrap();
        ensure(block.proj_p.out_channels() == split.iter().sum::<usize>(), || "proj_p width".into())?;
    }
    Ok(format!("max column-sum error {worst:.1e}; Att == V at 1x1; splits 16/16/80/240 and 16/16/112/336"))
}

fn gradient_certification() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let repdw = RepDwBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
    let sdta = SdtaBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
    let x = Tensor::<f64>::randn([1, 8, 4, 4], 1.0, &mut rng);
    let e_repdw = check_recorded(&repdw, &x, 1e-5, &mut rng).map_err(|e| e.to_string())?;
    let e_sdta = check_recorded(&sdta, &x, 1e-5, &mut rng).map_err(|e| e.to_string())?;
    ensure(e_repdw < 1e-4, || format!("RepDW error {e_repdw:.2e}"))?;
    ensure(e_sdta < 1e-4, || format!("SDTA error {e_sdta:.2e}"))?;
    within(start.elapsed(), 120)?;
    Ok(format!("RepDW {e_repdw:.2e}, SDTA {e_sdta:.2e}"))
}

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut conv32, mut conv64) = (0.0f64, 0.0f64);
    for _ in 0..300 {
        let n = rng.random_range(1..=4);
        let c = rng.random_range(1..=4);
        let h = rng.random_range(1..=9);
        let w = rng.random_range(1..=9);
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let groups = if rng.random_bool(0.5) { 1 } else { c };
        let oc = if groups == 1 { rng.random_range(1..=4) } else { c };
        let x = Tensor::<f64>::randn([n, c, h, w], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn([oc, c / groups, k, k], 1.0, &mut rng);
        let bias: Vec<f64> = (0..oc).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect = conv_oracle(&x, &wt, &bias, stride, pad, groups);
        let spec = ConvSpec::new(wt, bias, stride, pad, groups).unwrap();
        conv64 = conv64.max(max_diff(conv2d(&x, &spec).unwrap().data(), &expect));
        // The 32-bit oracle input is the rounded data, so only accumulation error remains.
        let (x32, spec32) = (x.cast::<f32>(), spec.cast::<f32>());
        let expect32 = conv_oracle(&x32.cast(), &spec32.weight().cast(), &spec32.cast::<f64>().bias().to_vec(), stride, pad, groups);
        conv32 = conv32.max(max_diff(conv2d(&x32, &spec32).unwrap().data(), &expect32));
    }
    ensure(conv32 < 1e-5, || format!("conv2d f32 {conv32:.2e}"))?;
    ensure(conv64 < 1e-12, || format!("conv2d f64 {conv64:.2e}"))?;

    let mut bn_err = 0.0f64;
    for _ in 0..50 {
        let c = rng.random_range(1..=6);
        let shape = [rng.random_range(1..=3), c, rng.random_range(1..=6), rng.random_range(1..=6)];
        let bn = microvit_core::init::batch_norm::<f64, _>(c, 1e-5, Init::Randomized, &mut rng);
        let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        bn_err = bn_err.max(max_diff(batchnorm_infer(&x, &bn).unwrap().data(), &bn_oracle(x.data(), shape, &bn)));
    }
    ensure(bn_err < 1e-6, || format!("batchnorm {bn_err:.2e}"))?;

    let (mut sm64, mut sm32) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let m = Matrix::new(r, c, data).unwrap();
        for axis in [0, 1] {
            let expect = softmax_oracle(&m, axis);
            sm64 = sm64.max(max_diff(softmax(&m, axis).unwrap().data(), &expect));
            sm32 = sm32.max(max_diff(softmax(&m.cast::<f32>(), axis).unwrap().data(), &softmax_oracle(&m.cast::<f32>().cast(), axis)));
        }
    }
    ensure(sm64 < 1e-6 && sm32 < 1e-6, || format!("softmax {sm64:.2e} (f64) {sm32:.2e} (f32)"))?;
    Ok(format!(
        "conv {conv32:.1e} (f32) {conv64:.1e} (f64), batchnorm {bn_err:.1e}, softmax {sm32:.1e} (f32) {sm64:.1e} (f64)"
    ))
}

fn determinism_and_persistence() -> Outcome {
    let config = Variant::S1.config();
    let a = Model32::build(&config, 9).unwrap();
    let b = Model32::build(&config, 9).unwrap();
    let bytes = io::encode(&a).unwrap();
    ensure(bytes == io::encode(&b).unwrap(), || "same-seed builds differ".into())?;

    let x = random_input::<f32>([2, 3, 224, 224], 5);
    for m in [a.clone(), a.deploy().unwrap()] {
        let enc = io::encode(&m).unwrap();
        let back: Model32 = io::decode(&enc).unwrap();
        ensure(io::encode(&back).unwrap() == enc, || format!("{:?} re-encode differs", m.mode()))?;
        ensure(back.forward(&x).unwrap() == m.forward(&x).unwrap(), || {
            format!("{:?} outputs differ after round trip", m.mode())
        })?;
    }

    let deploy = a.deploy().unwrap();
    let cfg = BenchConfig {
        batch_size: 1,
        warmup: 0,
        stop: Stop::Iterations(2),
        accuracy: 72.7,
        accuracy_source: "reported".into(),
        deterministic: true,
        input_seed: 4,
    };
    let power = PowerProvider::constant(25.8).unwrap();
    let r1 = run_bench(&deploy, &cfg, &power).unwrap();
    let r2 = run_bench(&deploy, &cfg, &power).unwrap();
    ensure(r1.metadata.output_digest == r2.metadata.output_digest, || "deterministic outputs differ".into())?;
    ensure(r1.latencies.len() == r2.latencies.len(), || "iteration counts differ".into())?;
    // The multi-threaded pool must agree with the single-threaded one bit for bit.
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let y1 = single.install(|| deploy.forward(&x).unwrap());
    ensure(y1 == deploy.forward(&x).unwrap(), || "thread count changes outputs".into())?;
    Ok(format!("builds identical, {} byte file round-trips, digest {}", bytes.len(), &r1.metadata.output_digest[..12]))
}

fn directional_speed() -> Outcome {
    let train = Model32::build(&Variant::S1.config(), 3).unwrap();
    let deploy = train.deploy().unwrap();
    let cfg = BenchConfig {
        batch_size: 1,
        warmup: 1,
        stop: Stop::Seconds(5.0),
        accuracy: 72.7,
        accuracy_source: "reported".into(),
        deterministic: false,
        input_seed: 8,
    };
    let power = PowerProvider::constant(25.8).unwrap();
    let t = run_bench(&train, &cfg, &power).unwrap();
    let d = run_bench(&deploy, &cfg, &power).unwrap();
    let msg = format!("deploy {:.2} img/s vs train {:.2} img/s", d.throughput, t.throughput);
    if d.throughput >= t.throughput {
        Ok(msg)
    } else {
        Err(msg)
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, bool); 9] = [
        ("fusion equivalence", fusion_equivalence, true),
        ("end-to-end deploy equivalence", deploy_equivalence, true),
        ("cost reconstruction", cost_reconstruction, true),
        ("energy arithmetic", energy_arithmetic, true),
        ("SDTA structure", sdta_structure, true),
        ("gradient certification", gradient_certification, true),
        ("kernel oracles", kernel_oracles, true),
        ("determinism and persistence", determinism_and_persistence, true),
        ("directional speed (soft)", directional_speed, false),
    ];
    let mut hard_failures = Vec::new();
    for (i, (name, run, hard)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[{}] PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) if hard => {
                println!("[{}] FAIL {name} ({secs:.1}s): {detail}", i + 1);
                hard_failures.push(name);
            }
            Err(detail) => println!("[{}] FAIL {name} ({secs:.1}s), warning only: {detail}", i + 1),
        }
    }
    assert!(hard_failures.is_empty(), "failed: {hard_failures:?}");
}
