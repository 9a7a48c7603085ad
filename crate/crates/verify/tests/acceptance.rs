//! Acceptance gate. Every criterion runs at its stated tolerance and prints a
//! single PASS/FAIL line; the test fails at the end if any criterion did.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use flsim_core::data::{build_topology, ChunkDataset, Scale, TopologyFixture};
use flsim_core::engine::{gradcheck_arch, run_experiment, ExperimentConfig, RunOptions, Topology, ROUNDS_FILE};
use flsim_core::model::{build_model, Arch, ParamSet, PartitionTag, SplitModel};
use flsim_core::nn::{init_params, Batch, LayerSpec};
use flsim_core::seed::derive_seed;
use flsim_core::strategies::*;
use flsim_core::{Element, Result as CoreResult, Tensor};
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, budget: Duration) -> Result<(), String> {
    let t = started.elapsed();
    check(t <= budget, || format!("took {:.1}s, budget {}s", t.as_secs_f64(), budget.as_secs()))
}

/// Uniform value in `[lo, hi)` from a seeded stream.
fn uniform(seed: u64, label: &str, i: u64, lo: f64, hi: f64) -> f64 {
    let u = (derive_seed(seed, label, i) >> 11) as f64 / (1u64 << 53) as f64;
    lo + (hi - lo) * u
}

/// Runs one `flsim` invocation in-process: (exit status, stdout).
fn flsim(args: &[&str]) -> (u8, String) {
    let mut out = Vec::new();
    let code = flsim_cli::execute(std::iter::once("flsim").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).expect("utf-8 output"))
}

fn fixture_config(strategy: Strategy, fixture: TopologyFixture, scale: &str, rounds: u32, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(strategy, Topology::Fixture(fixture));
    c.scale = Scale::parse(scale).unwrap();
    c.rounds = rounds;
    c.seed = seed;
    c
}

fn to_dir(dir: &Path) -> RunOptions {
    RunOptions { out_dir: Some(dir.to_path_buf()), ..RunOptions::default() }
}

fn topology_fidelity() -> Outcome {
    let started = Instant::now();
    let tables: [(&str, &[(usize, usize, usize)]); 3] = [
        ("table1", &[(900, 900, 1800), (900, 900, 1800)]),
        ("table2", &[(641, 27, 668), (655, 1305, 1960), (504, 468, 972)]),
        ("table3", &[(570, 402, 972), (151, 49, 200), (1019, 777, 1796), (695, 1207, 1902)]),
    ];
    for (name, rows) in tables {
        let (code, got) = flsim(&["partition", "--table", name]);
        check(code == 0, || format!("{name}: exit {code}"))?;
        let mut want = String::from("client,fight,nonfight,total\n");
        for (i, (f, n, t)) in rows.iter().enumerate() {
            want.push_str(&format!("{},{f},{n},{t}\n", i + 1));
        }
        check(got == want, || format!("{name}: got {got:?}"))?;
    }
    within(started, Duration::from_secs(1))?;
    Ok(format!("3 tables exact in {:.2}s", started.elapsed().as_secs_f64()))
}

fn gradient_fidelity() -> Outcome {
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for arch in [Arch::Mini, Arch::DiffGated53] {
        let started = Instant::now();
        let r = gradcheck_arch(arch, 1).map_err(|e| format!("{arch}: {e}"))?;
        let secs = started.elapsed().as_secs_f64();
        let line = format!(
            "{arch}: max_rel_err {:.3e} at {} ({} checked, {} kinked, smooth max {:.3e}, {secs:.1}s)",
            r.max_rel_err, r.worst_param_index, r.checked, r.kinked, r.max_rel_err_smooth
        );
        if r.max_rel_err < 1e-4 && secs <= 30.0 {
            notes.push(line);
        } else {
            failures.push(line);
        }
    }
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(failures.into_iter().chain(notes).collect::<Vec<_>>().join("; "))
    }
}

fn scalar_update<T: Element>(id: u32, values: &[f64], n: usize) -> ClientUpdate<T> {
    let k = values.len() - 1;
    let entries = vec![
        ("0.weight".to_string(), Tensor::new(vec![k], values[..k].iter().map(|&v| T::from_f64(v)).collect()).unwrap()),
        ("0.bias".to_string(), Tensor::scalar(T::from_f64(values[k]))),
    ];
    ClientUpdate {
        client_id: id,
        payload: ParamSet::new(PartitionTag::Full, entries).unwrap(),
        num_samples: n,
        train_loss: 0.0,
    }
}

fn aggregation_exactness() -> Outcome {
    let started = Instant::now();
    let cases = 500u64;
    for case in 0..cases {
        let clients = 1 + (derive_seed(case, "clients", 0) % 7) as usize;
        let counts: Vec<usize> = (0..clients).map(|i| 1 + (derive_seed(case, "count", i as u64) % 5000) as usize).collect();

        let shared: Vec<f64> = (0..5).map(|j| uniform(case, "shared", j, -1e6, 1e6)).collect();
        let same: Vec<ClientUpdate<f64>> = counts.iter().enumerate().map(|(i, &n)| scalar_update(i as u32, &shared, n)).collect();
        let agg = aggregate_weighted(&same).map_err(|e| e.to_string())?;
        check(agg.bit_eq(&same[0].payload), || format!("case {case}: identical payloads not reproduced bitwise"))?;

        let k = 2 + (derive_seed(case, "k", 0) % 999) as usize;
        let values: Vec<Vec<f64>> = (0..clients)
            .map(|i| (0..5).map(|j| uniform(case, "v", (i * 5 + j) as u64, -100.0, 100.0)).collect())
            .collect();
        let a: Vec<ClientUpdate<f32>> = (0..clients).map(|i| scalar_update(i as u32, &values[i], counts[i])).collect();
        let b: Vec<ClientUpdate<f32>> = (0..clients).map(|i| scalar_update(i as u32, &values[i], counts[i] * k)).collect();
        let (x, y) = (aggregate_weighted(&a).unwrap(), aggregate_weighted(&b).unwrap());
        for (p, q) in x.tensors().zip(y.tensors()) {
            for (&p, &q) in p.data().iter().zip(q.data()) {
                let rel = (p - q).abs() / p.abs().max(q.abs()).max(f32::MIN_POSITIVE);
                check(rel <= 1e-6, || format!("case {case}: count scaling by {k} moved {p} to {q}"))?;
            }
        }
    }
    let table2: Vec<ClientUpdate<f64>> = [(1.0, 668), (2.0, 1960), (3.0, 972)]
        .iter()
        .enumerate()
        .map(|(i, &(v, n))| scalar_update(i as u32 + 1, &[v, v], n))
        .collect();
    let got = aggregate_weighted(&table2).unwrap().get("0.bias").unwrap().data()[0];
    let want = 7504.0 / 3600.0;
    check((got - want).abs() < 1e-12, || format!("weighted mean {got} != 7504/3600"))?;
    within(started, Duration::from_secs(5))?;
    Ok(format!("{cases} random cases, 7504/3600 err {:.1e}", (got - want).abs()))
}

fn wire_privacy() -> Outcome {
    let started = Instant::now();
    let personal: Vec<String> = build_model::<f32>(Arch::Mini, 0).personal_names().iter().map(|s| s.to_string()).collect();
    let mut crossed = 0usize;
    for strategy in [Strategy::FedPer, Strategy::FedMetaPer] {
        let cfg = fixture_config(strategy, TopologyFixture::Table2, "0.05", 20, 0);
        let out = run_experiment(&cfg, &RunOptions::default()).map_err(|e| format!("{strategy}: {e}"))?;
        let logged = out
            .wire
            .iter()
            .flat_map(|w| &w.names)
            .chain(out.reports.iter().flat_map(|r| &r.wire_tensor_names));
        let mut n = 0;
        for name in logged {
            check(!personal.contains(name), || format!("{strategy}: `{name}` crossed the boundary"))?;
            n += 1;
        }
        check(n > 0, || format!("{strategy}: empty wire log"))?;
        crossed += n;
    }
    within(started, Duration::from_secs(120))?;
    Ok(format!("0 of {crossed} logged names are personal ({})", personal.join(",")))
}

/// `f(w) = 0.5 * a * |w|^2`.
struct Quadratic(f64);

impl GradientFn<f64> for Quadratic {
    fn loss_and_grad(&self, p: &[Tensor<f64>]) -> CoreResult<(f64, Vec<Tensor<f64>>)> {
        let loss = p.iter().map(|t| 0.5 * self.0 * t.norm_sq()).sum();
        Ok((loss, p.iter().map(|t| t.map(|w| self.0 * w)).collect()))
    }
}

fn tiny_batch(n: usize, seed: u64) -> Batch<f64> {
    let mut i = 0u64;
    let inputs = Tensor::from_fn(&[n, 1, 1, 3], |_| {
        i += 1;
        uniform(seed, "batch", i, 0.0, 1.0)
    })
    .unwrap();
    Batch::new(inputs, (0..n).map(|i| i % 2).collect()).unwrap()
}

/// `H v` from a full finite-difference Hessian built one coordinate at a time.
fn brute_hessian_times(f: &NetObjective<'_, f64>, params: &[Tensor<f64>], v: &[Tensor<f64>]) -> Vec<f64> {
    let flat: Vec<f64> = params.iter().flat_map(|t| t.data().to_vec()).collect();
    let vflat: Vec<f64> = v.iter().flat_map(|t| t.data().to_vec()).collect();
    let grad = |x: &[f64]| -> Vec<f64> {
        let mut off = 0;
        let ts: Vec<Tensor<f64>> = params
            .iter()
            .map(|t| {
                let out = Tensor::new(t.dims().to_vec(), x[off..off + t.len()].to_vec()).unwrap();
                off += t.len();
                out
            })
            .collect();
        f.loss_and_grad(&ts).unwrap().1.iter().flat_map(|t| t.data().to_vec()).collect()
    };
    let h = 1e-5;
    let mut hv = vec![0.0; flat.len()];
    for j in 0..flat.len() {
        let (mut xp, mut xm) = (flat.clone(), flat.clone());
        xp[j] += h;
        xm[j] -= h;
        let (gp, gm) = (grad(&xp), grad(&xm));
        for (i, out) in hv.iter_mut().enumerate() {
            *out += (gp[i] - gm[i]) / (2.0 * h) * vflat[j];
        }
    }
    hv
}

fn perfedavg_correctness() -> Outcome {
    let started = Instant::now();

    let w = [Tensor::scalar(1.0)];
    let (_, full) = meta_gradient(&Quadratic(1.0), &Quadratic(1.0), &w, 0.1, HessianMode::FullHvp).map_err(|e| e.to_string())?;
    let (_, fo) = meta_gradient(&Quadratic(1.0), &Quadratic(1.0), &w, 0.1, HessianMode::FirstOrder).map_err(|e| e.to_string())?;
    let (full, fo) = (full[0].data()[0], fo[0].data()[0]);
    check((full - 0.81).abs() <= 1e-12, || format!("(a) full_hvp gave {full}, want 0.81"))?;
    check((fo - 0.9).abs() <= 1e-12, || format!("(a) first_order gave {fo}, want 0.9"))?;

    // (b) three rounds of two clients, aggregating after each round.
    let data: Vec<ChunkDataset<f32>> = build_topology(TopologyFixture::Table1, Scale::parse("0.02").unwrap(), Arch::Mini.input_dims(), 4)
        .map_err(|e| e.to_string())?;
    let hyper = Hyper { lr_meta: 0.0, batch_size: 4, ..Hyper::default() };
    let mut meta_model: SplitModel<f32> = build_model(Arch::Mini, 8);
    let mut plain_model = meta_model.clone();
    for round in 0..3u64 {
        let mut meta_ups = Vec::new();
        let mut plain_ups = Vec::new();
        for (i, ds) in data.iter().enumerate() {
            let id = i as u32 + 1;
            let sched = MetaSchedule::new(ds.len(), hyper.batch_size, hyper.local_epochs, derive_seed(round, "accept", id as u64));
            meta_ups.push(client_update_perfedavg_with_schedule(id, &meta_model, ds, &hyper, &sched).map_err(|e| e.to_string())?);
            plain_ups.push(client_update_fedavg_with_schedule(id, &plain_model, ds, hyper.lr_local, &sched.queries()).map_err(|e| e.to_string())?);
        }
        let meta_agg = aggregate_weighted(&meta_ups).unwrap();
        let plain_agg = aggregate_weighted(&plain_ups).unwrap();
        check(meta_agg.bit_eq(&plain_agg), || format!("(b) trajectories differ at round {}", round + 1))?;
        meta_model.set_params(meta_agg.tensors().cloned().collect()).map_err(|e| e.to_string())?;
        plain_model.set_params(plain_agg.tensors().cloned().collect()).map_err(|e| e.to_string())?;
    }
    check(!meta_model.full().bit_eq(&build_model::<f32>(Arch::Mini, 8).full()), || "(b) model never moved".into())?;

    let specs = vec![LayerSpec::Flatten, LayerSpec::dense(3, 3), LayerSpec::Relu, LayerSpec::dense(3, 2)];
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut params: Vec<Tensor<f64>> = init_params(&specs, seed);
        for (k, t) in params.iter_mut().enumerate().skip(1).step_by(2) {
            for (j, b) in t.data_mut().iter_mut().enumerate() {
                *b = uniform(seed, "bias", (k * 10 + j) as u64, -0.1, 0.1);
            }
        }
        let count: usize = params.iter().map(Tensor::len).sum();
        check(count == 20, || format!("(c) model has {count} parameters"))?;
        let batch = tiny_batch(8, seed);
        let f = NetObjective { specs: &specs, batch: &batch };
        let mut idx = 0u64;
        let v: Vec<Tensor<f64>> = params
            .iter()
            .map(|t| {
                Tensor::from_fn(t.dims(), |_| {
                    idx += 1;
                    uniform(seed, "v", idx, -1.0, 1.0)
                })
                .unwrap()
            })
            .collect();
        let got: Vec<f64> = hvp_central(&f, &params, &v).unwrap().iter().flat_map(|t| t.data().to_vec()).collect();
        let want = brute_hessian_times(&f, &params, &v);
        let num = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    check(worst < 1e-3, || format!("(c) HVP relative error {worst:.3e}"))?;
    within(started, Duration::from_secs(60))?;
    Ok(format!("(a) 0.81/0.9 exact; (b) 3 rounds bitwise; (c) HVP rel err {worst:.2e}"))
}

/// Mean absolute difference between consecutive frames.
fn motion_energy(x: &[f32], dims: [usize; 3]) -> f64 {
    let frame = dims[1] * dims[2];
    let mut sum = 0.0;
    for f in 1..dims[0] {
        for p in 0..frame {
            sum += (x[f * frame + p] - x[(f - 1) * frame + p]).abs() as f64;
        }
    }
    sum / ((dims[0] - 1) * frame) as f64
}

/// Leave-one-out 1-NN accuracy on motion energy, pooled over all clients.
fn one_nn_accuracy(sets: &[ChunkDataset<f32>], dims: [usize; 3]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for ds in sets {
        let feats: Vec<(f64, usize)> = (0..ds.len())
            .map(|i| {
                let (x, l) = ds.sample(i);
                (motion_energy(x, dims), l)
            })
            .collect();
        for (i, &(f, l)) in feats.iter().enumerate() {
            let nearest = feats
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .min_by(|a, b| (a.1 .0 - f).abs().total_cmp(&(b.1 .0 - f).abs()))
                .map(|(_, &(_, label))| label);
            correct += usize::from(nearest == Some(l));
            total += 1;
        }
    }
    correct as f64 / total as f64
}

fn personalization_benefit() -> Outcome {
    let started = Instant::now();
    let seeds = 0..5u64;
    let dims = Arch::Mini.input_dims();
    let mut nn_worst: f64 = 1.0;
    for seed in seeds.clone() {
        let sets: Vec<ChunkDataset<f32>> = build_topology(TopologyFixture::Table2, Scale::parse("0.1").unwrap(), dims, seed).map_err(|e| e.to_string())?;
        nn_worst = nn_worst.min(one_nn_accuracy(&sets, dims));
    }
    check(nn_worst >= 0.9, || format!("1-NN oracle only reaches {nn_worst:.3}"))?;

    let mean_acc = |strategy: Strategy| -> Result<(f64, Vec<f64>), String> {
        let mut accs = Vec::new();
        for seed in seeds.clone() {
            let cfg = fixture_config(strategy, TopologyFixture::Table2, "0.1", 20, seed);
            let out = run_experiment(&cfg, &RunOptions::default()).map_err(|e| format!("{strategy} seed {seed}: {e}"))?;
            accs.push(out.summary.final_round.global_acc);
        }
        Ok((accs.iter().sum::<f64>() / accs.len() as f64, accs))
    };
    let (fedper, per_seed) = mean_acc(Strategy::FedPer)?;
    let (fedavg, avg_seed) = mean_acc(Strategy::FedAvg)?;
    let detail = format!(
        "fedper {fedper:.4} {per_seed:.3?} vs fedavg {fedavg:.4} {avg_seed:.3?}; 1-NN min {nn_worst:.3}; {:.0}s",
        started.elapsed().as_secs_f64()
    );
    check(fedper > fedavg, || format!("fedper does not beat fedavg: {detail}"))?;
    check(fedper > 0.85, || format!("fedper mean below 0.85: {detail}"))?;
    within(started, Duration::from_secs(600))?;
    Ok(detail)
}

fn determinism_and_resume() -> Outcome {
    let started = Instant::now();
    for strategy in Strategy::ALL {
        let cfg = fixture_config(strategy, TopologyFixture::Table2, "0.05", 10, 3);
        let (a, b, split) = (TempDir::new().unwrap(), TempDir::new().unwrap(), TempDir::new().unwrap());
        run_experiment(&cfg, &to_dir(a.path())).map_err(|e| e.to_string())?;
        run_experiment(&cfg, &to_dir(b.path())).map_err(|e| e.to_string())?;
        let whole = fs::read(a.path().join(ROUNDS_FILE)).unwrap();
        check(whole == fs::read(b.path().join(ROUNDS_FILE)).unwrap(), || format!("{strategy}: repeated runs differ"))?;

        let first = ExperimentConfig { rounds: 5, ..cfg.clone() };
        run_experiment(&first, &RunOptions { checkpoint_every: Some(5), ..to_dir(split.path()) }).map_err(|e| e.to_string())?;
        run_experiment(&cfg, &RunOptions { resume: true, ..to_dir(split.path()) }).map_err(|e| e.to_string())?;
        let resumed = fs::read_to_string(split.path().join(ROUNDS_FILE)).unwrap();
        let whole = String::from_utf8(whole).unwrap();
        let tail = |s: &str| s.lines().skip(5).map(str::to_string).collect::<Vec<_>>();
        check(tail(&whole).len() == 5, || format!("{strategy}: expected 10 rounds"))?;
        check(tail(&whole) == tail(&resumed), || format!("{strategy}: rounds 6-10 differ after resume"))?;
    }
    within(started, Duration::from_secs(180))?;
    Ok(format!("4 strategies byte-identical, resume at 5 matches 6-10 ({:.1}s)", started.elapsed().as_secs_f64()))
}

fn schedule_independence() -> Outcome {
    let started = Instant::now();
    let dir = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for jobs in ["1", "4"] {
        let out = dir.path().join(format!("jobs{jobs}"));
        let (code, _) = flsim(&["run", "--preset", "table3", "--scale", "0.05", "--jobs", jobs, "--out", out.to_str().unwrap()]);
        check(code == 0, || format!("jobs {jobs}: exit {code}"))?;
        outputs.push(fs::read(out.join(ROUNDS_FILE)).unwrap());
    }
    check(outputs[0] == outputs[1], || "rounds.jsonl differs between --jobs 1 and --jobs 4".into())?;
    within(started, Duration::from_secs(180))?;
    Ok(format!("{} bytes identical ({:.1}s)", outputs[0].len(), started.elapsed().as_secs_f64()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("topology fidelity", topology_fidelity),
        ("gradient fidelity", gradient_fidelity),
        ("aggregation exactness", aggregation_exactness),
        ("wire privacy", wire_privacy),
        ("per-fedavg correctness", perfedavg_correctness),
        ("personalization benefit", personalization_benefit),
        ("determinism and resume", determinism_and_resume),
        ("schedule independence", schedule_independence),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(reason) => {
                println!("FAIL {} {name}: {reason}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
