//! Scratch calibration harness for the shipped planted-task config.
//! Not part of the crate's public surface; deleted once numbers are locked.

use loragate_core::*;
use rayon::prelude::*;

const DEPTH: usize = 6;

static DIMV: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(8);

fn dim() -> usize {
    DIMV.load(std::sync::atomic::Ordering::Relaxed)
}

static IOV: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
static LINOUT: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

fn linout() -> bool {
    LINOUT.load(std::sync::atomic::Ordering::Relaxed)
}

fn io_dim() -> Option<usize> {
    match IOV.load(std::sync::atomic::Ordering::Relaxed) {
        0 => None,
        v => Some(v),
    }
}

static RANK_A: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(2);
static TRANK: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(2);
static PLANT: std::sync::OnceLock<Vec<usize>> = std::sync::OnceLock::new();

fn rank() -> usize {
    RANK_A.load(std::sync::atomic::Ordering::Relaxed)
}

fn teacher_rank() -> usize {
    TRANK.load(std::sync::atomic::Ordering::Relaxed)
}

fn planted() -> Vec<usize> {
    PLANT.get_or_init(|| vec![1, 4]).clone()
}

static BASE_SCALE: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
static RELU: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

fn activation() -> Activation {
    if RELU.load(std::sync::atomic::Ordering::Relaxed) {
        Activation::Relu
    } else {
        Activation::Tanh
    }
}

fn base_scale() -> f64 {
    match BASE_SCALE.load(std::sync::atomic::Ordering::Relaxed) {
        0 => 1.0,
        bits => f64::from_bits(bits),
    }
}

fn task(delta_scale: f64) -> PlantedTask {
    PlantedTask {
        depth: DEPTH,
        dim: dim(),
        io_dim: io_dim(),
        planted: planted(),
        teacher_rank: teacher_rank(),
        delta_scale,
        noise: 0.01,
        n_train: NTRAIN.load(std::sync::atomic::Ordering::Relaxed),
        n_val: NVAL.load(std::sync::atomic::Ordering::Relaxed),
        n_test: 256,
        activation: activation(),
        linear_output: linout(),
        base_scale: base_scale(),
        kind: TaskKindName::Regression,
        classes: None,
    }
}

static BATCHES: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(32);
static NTRAIN: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(128);
static NVAL: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(128);

fn batch_size() -> usize {
    BATCHES.load(std::sync::atomic::Ordering::Relaxed)
}

fn run_cfg(t: usize, k: usize, eta_theta: f64, eta_alpha: f64, seed: u64) -> RunConfig {
    RunConfig {
        t,
        k,
        eta_theta,
        eta_alpha,
        batch_train: batch_size().min(NTRAIN.load(std::sync::atomic::Ordering::Relaxed)),
        batch_val: batch_size().min(NVAL.load(std::sync::atomic::Ordering::Relaxed)),
        seed,
        early_stop: None,
        rank: rank(),
        rule: SelectionRule::Threshold,
        allow_empty_selection: false,
    }
}

fn ft_cfg(epochs: usize, eta: f64, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        eta_theta: eta,
        batch: 32,
        seed,
        loss: LossKind::Mse,
        eval_every: 5,
        allow_empty: true,
        carry_alpha: false,
    }
}

fn select_once(ds: f64, t: usize, k: usize, et: f64, ea: f64, seed: u64) -> (Vec<usize>, Vec<f64>, GatedLoraModel, PlantedTask) {
    let task = task(ds);
    let (train, val, _) = generate_planted(&task, seed).unwrap();
    let mut model = planted_base_model(&task, rank(), seed).unwrap();
    let cfg = run_cfg(t, k, et, ea, seed);
    let (sel, _) = run_selection(&mut model, &train, &val, &cfg).unwrap();
    (sel.selected, sel.alpha_final, model, task)
}

fn grid() {
    let cells: Vec<(f64, f64, f64)> = [0.4, 0.6, 0.8, 1.2]
        .iter()
        .flat_map(|&ds| {
            [0.05, 0.1].iter().flat_map(move |&et| {
                [0.2, 0.5, 1.0, 2.0].iter().map(move |&ea| (ds, et, ea))
            })
        })
        .collect();
    let results: Vec<String> = cells
        .par_iter()
        .map(|&(ds, et, ea)| {
            let mut exact = 0;
            let mut superset = 0;
            let mut sizes = Vec::new();
            for seed in 0..10u64 {
                let (selected, _, _, _) = select_once(ds, 300, 8, et, ea, seed);
                if selected == planted() {
                    exact += 1;
                }
                if planted().iter().all(|p| selected.contains(p)) {
                    superset += 1;
                }
                sizes.push(selected.len());
            }
            format!("ds={ds:<4} et={et:<5} ea={ea:<4} exact={exact}/10 superset={superset}/10 sizes={sizes:?}")
        })
        .collect();
    for r in results {
        println!("{r}");
    }
}

fn check(ds: f64, et: f64, ea: f64, ft_epochs: usize, ft_eta: f64) {
    // 5b: exact recovery across seeds at T=300 K=8
    let seeds: Vec<u64> = (0..10).collect();
    let per_seed: Vec<(u64, Vec<usize>, GatedLoraModel, PlantedTask, Vec<f64>)> = seeds
        .par_iter()
        .map(|&seed| {
            let (selected, alpha, model, task) = select_once(ds, 300, 8, et, ea, seed);
            (seed, selected, model, task, alpha)
        })
        .collect();
    let exact = per_seed.iter().filter(|(_, s, _, _, _)| *s == planted()).count();
    println!("5b exact recovery: {exact}/10");
    for (seed, sel, _, _, alpha) in &per_seed {
        let a: Vec<String> = alpha.iter().map(|v| format!("{v:+.3}")).collect();
        println!("  seed {seed}: selected={sel:?} alpha=[{}]", a.join(" "));
    }

    // 5c: finetune(S*) val <= finetune(all) val
    let counts: Vec<(u64, f64, f64, f64, f64, f64)> = seeds
        .par_iter()
        .map(|&seed| {
            let task = task(ds);
            let (train, val, test) = generate_planted(&task, seed).unwrap();
            let base = planted_base_model(&task, rank(), seed).unwrap();
            let cfg = ft_cfg(ft_epochs, ft_eta, seed);
            let mut m1 = base.clone();
            let star = finetune_selected(&mut m1, &planted(), &train, &val, &test, &cfg).unwrap();
            let all: Vec<usize> = (0..DEPTH).collect();
            let mut m2 = base.clone();
            let full = finetune_selected(&mut m2, &all, &train, &val, &test, &cfg).unwrap();
            (seed, star.val_loss, full.val_loss, star.test_loss, full.test_loss, star.train_loss)
        })
        .collect();
    let wins = counts.iter().filter(|(_, s, f, _, _, _)| s <= f).count();
    println!("5c planted-vs-all wins: {wins}/10");
    for (seed, sv, fv, st, ft, _) in &counts {
        println!("  seed {seed}: S* val={sv:.4e} all val={fv:.4e}  S* test={st:.4e} all test={ft:.4e}");
    }

    // 7: identical selected set across 6 (K,T) cells
    let grid_ok: Vec<(u64, bool, Vec<Vec<usize>>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut sets = Vec::new();
            for &k in &[4usize, 8] {
                for &t in &[300usize, 600, 1200] {
                    let (selected, _, _, _) = select_once(ds, t, k, et, ea, seed);
                    sets.push(selected);
                }
            }
            let same = sets.iter().all(|s| *s == sets[0]);
            (seed, same, sets)
        })
        .collect();
    let stable = grid_ok.iter().filter(|(_, ok, _)| *ok).count();
    println!("7 (K,T)-stable seeds: {stable}/10");
    for (seed, ok, sets) in &grid_ok {
        if !ok {
            println!("  seed {seed}: {sets:?}");
        }
    }

    // 9: carry-alpha strictly worse test loss than full pipeline
    let carry: Vec<(u64, f64, f64)> = seeds
        .par_iter()
        .map(|&seed| {
            let task = task(ds);
            let (train, val, test) = generate_planted(&task, seed).unwrap();
            let base = planted_base_model(&task, rank(), seed).unwrap();
            let mut model = base.clone();
            let cfg = run_cfg(300, 8, et, ea, seed);
            let (sel, _) = run_selection(&mut model, &train, &val, &cfg).unwrap();
            let alpha = AlphaVector::from_raw(sel.alpha_final.clone()).unwrap();
            let carried = evaluate_carry(&model, &alpha, &train, &val, &test).unwrap();
            let mut m2 = base.clone();
            let cfg3 = ft_cfg(ft_epochs, ft_eta, seed);
            let full = finetune_selected(&mut m2, &sel.selected, &train, &val, &test, &cfg3).unwrap();
            (seed, carried.test_loss, full.test_loss)
        })
        .collect();
    let worse = carry.iter().filter(|(_, c, f)| c > f).count();
    println!("9 carry strictly worse: {worse}/10");
    for (seed, c, f) in &carry {
        println!("  seed {seed}: carry={c:.4e} full={f:.4e}");
    }

    // 6 + 5a on candidate shipped seeds
    let scan: Vec<u64> = (0..12).collect();
    let results: Vec<String> = scan
        .par_iter()
        .map(|&seed| {
            let task = task(ds);
            let (train, val, test) = generate_planted(&task, seed).unwrap();
            let base = planted_base_model(&task, rank(), seed).unwrap();
            let cfg = ft_cfg(ft_epochs, ft_eta, seed);
            // layer-count curve, best of 3 random draws per k
            let mut best_per_k = Vec::new();
            for k in 0..=DEPTH {
                let mut best = f64::INFINITY;
                for draw in 0..3u64 {
                    let cell = (k as u64) * 3 + draw;
                    let draw_seed = Rng::from_seed(seed).stream_indexed("layer-grid", cell).next_u64();
                    let mut m = base.clone();
                    let (_, rep) =
                        random_k_baseline(&mut m, k, draw_seed, &train, &val, &test, &cfg).unwrap();
                    best = best.min(rep.val_loss);
                }
                best_per_k.push(best);
            }
            let argmin = best_per_k
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let interior = argmin != 0 && argmin != DEPTH;
            // oracle rank of S*
            let entries = subset_oracle(&base, &train, &val, &test, &cfg, None).unwrap();
            let rank = oracle_rank(&entries, &planted()).unwrap();
            let curve: Vec<String> = best_per_k.iter().map(|v| format!("{v:.3e}")).collect();
            format!(
                "seed {seed}: argmin_k={argmin} interior={interior} oracle_rank(S*)={rank} curve=[{}]",
                curve.join(" ")
            )
        })
        .collect();
    println!("6/5a per-seed scan:");
    for r in results {
        println!("  {r}");
    }
}

fn peek(ds: f64, et: f64, ea: f64, t: usize, k: usize) {
    println!("ds={ds} et={et} ea={ea} T={t} K={k} rank={} trank={} plant={:?} base={}", rank(), teacher_rank(), planted(), base_scale());
    let rows: Vec<String> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let (selected, alpha, _, _) = select_once(ds, t, k, et, ea, seed);
            let a: Vec<String> = alpha.iter().map(|v| format!("{v:+.2}")).collect();
            format!("  seed {seed}: sel={selected:?} alpha=[{}]", a.join(" "))
        })
        .collect();
    for r in rows {
        println!("{r}");
    }
}

fn margin(ds: f64, ft_epochs: usize, ft_eta: f64, ft_batch: usize) {
    // Ground-truth identifiability: retrain every 2-subset plus the full
    // set; the planted pair should win with a margin before any gate
    // dynamics are worth tuning.
    println!(
        "margin ds={ds} dim={} io={:?} plant={:?} ft=({ft_epochs},{ft_eta},{ft_batch})",
        dim(),
        io_dim(),
        planted()
    );
    for seed in 0..3u64 {
        let task = task(ds);
        let (train, val, test) = generate_planted(&task, seed).unwrap();
        let base = planted_base_model(&task, rank(), seed).unwrap();
        let mut cfg = ft_cfg(ft_epochs, ft_eta, seed);
        cfg.batch = ft_batch;
        let mut rows: Vec<(Vec<usize>, f64)> = Vec::new();
        for i in 0..DEPTH {
            for j in (i + 1)..DEPTH {
                let sel = vec![i, j];
                let mut m = base.clone();
                let rep = finetune_selected(&mut m, &sel, &train, &val, &test, &cfg).unwrap();
                rows.push((sel, rep.val_loss));
            }
        }
        let all: Vec<usize> = (0..DEPTH).collect();
        let mut m = base.clone();
        let rep = finetune_selected(&mut m, &all, &train, &val, &test, &cfg).unwrap();
        rows.push((all, rep.val_loss));
        rows.sort_by(|a, b| a.1.total_cmp(&b.1));
        let line: Vec<String> = rows
            .iter()
            .take(6)
            .map(|(s, v)| {
                let tag = if *s == planted() { "*" } else { "" };
                format!("{s:?}{tag}={v:.3e}")
            })
            .collect();
        let star = rows.iter().position(|(s, _)| *s == planted()).unwrap();
        println!("  seed {seed}: rank(S*)={} top: {}", star + 1, line.join(" "));
    }
}

fn orank(ds: f64, ft_epochs: usize, ft_eta: f64, ft_batch: usize) {
    println!(
        "orank ds={ds} dim={} io={:?} plant={:?} ft=({ft_epochs},{ft_eta},{ft_batch})",
        dim(),
        io_dim(),
        planted()
    );
    let rows: Vec<String> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let task = task(ds);
            let (train, val, test) = generate_planted(&task, seed).unwrap();
            let base = planted_base_model(&task, rank(), seed).unwrap();
            let mut cfg = ft_cfg(ft_epochs, ft_eta, seed);
            cfg.batch = ft_batch;
            let mut entries = subset_oracle(&base, &train, &val, &test, &cfg, None).unwrap();
            let rank = oracle_rank(&entries, &planted()).unwrap();
            entries.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
            let top: Vec<String> = entries
                .iter()
                .take(8)
                .map(|e| {
                    let tag = if e.subset == planted() { "*" } else { "" };
                    format!("{:?}{tag}={:.3e}", e.subset, e.val_loss)
                })
                .collect();
            format!("  seed {seed}: rank(S*)={rank} top: {}", top.join(" "))
        })
        .collect();
    for r in rows {
        println!("{r}");
    }
}

fn screen(ds: f64, et: f64, ea: f64) {
    // Cheap proxy for grid7: only the two extreme cells of the (K,T) grid.
    let cells = [(4usize, 300usize), (8, 1200)];
    let rows: Vec<(Vec<usize>, Vec<usize>)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let a = select_once(ds, 300, 4, et, ea, seed).0;
            let b = select_once(ds, 1200, 8, et, ea, seed).0;
            (a, b)
        })
        .collect();
    let e0 = rows.iter().filter(|(a, _)| *a == planted()).count();
    let e1 = rows.iter().filter(|(_, b)| *b == planted()).count();
    let agree = rows.iter().filter(|(a, b)| a == b).count();
    let _ = cells;
    println!(
        "ds={ds:<4} et={et:<4} ea={ea:<4} dim={} plant={:?} base={}: exact(4,300)={e0}/10 exact(8,1200)={e1}/10 agree={agree}/10",
        dim(),
        planted(),
        base_scale()
    );
}

fn fmtv(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:+9.2e}")).collect::<Vec<_>>().join(" ")
}

fn util(ds: f64, et: f64, ea: f64, k: usize, seed: u64) {
    let task = task(ds);
    let (train, val, _) = generate_planted(&task, seed).unwrap();
    println!("planted={:?} rank={} seed={seed}", task.planted, rank());
    for &t in &[1usize, 3, 10, 30, 60, 120, 300, 600, 1200] {
        let mut model = planted_base_model(&task, rank(), seed).unwrap();
        let cfg = run_cfg(t, k, et, ea, seed);
        let (sel, _) = run_selection(&mut model, &train, &val, &cfg).unwrap();
        let alpha = AlphaVector::from_raw(sel.alpha_final.clone()).unwrap();
        let gates = alpha.relaxed();
        let (lv, gb) = model.loss_and_grads_at(&val, &gates).unwrap();
        let (lt, _) = model.loss_and_grads_at(&train, &gates).unwrap();
        let full = model.forward(&val.inputs, &gates).unwrap();
        let mut contrib = vec![0.0; task.depth];
        for j in 0..task.depth {
            let mut gz = gates.clone();
            gz[j] = 0.0;
            let d = model.forward(&val.inputs, &gz).unwrap().sub(&full).unwrap();
            contrib[j] = (d.norm_sq() / d.len() as f64).sqrt();
        }
        println!("T={t:<5} train={lt:.3e} val={lv:.3e} sel={:?}", sel.selected);
        println!("   alpha  {}", fmtv(alpha.raw()));
        println!("   u_gate {}", fmtv(&gb.gates));
        println!("   contrib{}", fmtv(&contrib));
    }
}

fn grid7(ds: f64, et: f64, ea: f64) {
    println!(
        "grid7 ds={ds} et={et} ea={ea} rank={} trank={} plant={:?} base={} batch={}",
        rank(),
        teacher_rank(),
        planted(),
        base_scale(),
        batch_size()
    );
    let cells: Vec<(usize, usize)> = [4usize, 8]
        .iter()
        .flat_map(|&k| [300usize, 600, 1200].iter().map(move |&t| (k, t)))
        .collect();
    let rows: Vec<(u64, Vec<Vec<usize>>)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let sets: Vec<Vec<usize>> = cells
                .iter()
                .map(|&(k, t)| select_once(ds, t, k, et, ea, seed).0)
                .collect();
            (seed, sets)
        })
        .collect();
    let mut stable = 0;
    let mut exact_per_cell = vec![0usize; cells.len()];
    for (seed, sets) in &rows {
        let same = sets.iter().all(|s| *s == sets[0]);
        if same {
            stable += 1;
        }
        for (i, s) in sets.iter().enumerate() {
            if *s == planted() {
                exact_per_cell[i] += 1;
            }
        }
        let desc: Vec<String> = sets.iter().map(|s| format!("{s:?}")).collect();
        println!("  seed {seed} stable={} {}", same as u8, desc.join(" "));
    }
    println!("stable={stable}/10");
    for (i, &(k, t)) in cells.iter().enumerate() {
        println!("  K={k} T={t}: exact={}/10", exact_per_cell[i]);
    }
}

fn solo(ds: f64, et: f64, ea: f64, t: usize, k: usize) {
    // Plant one layer at a time; how often does the top logit point at it?
    println!("solo ds={ds} et={et} ea={ea} T={t} K={k} base={} batch={}", base_scale(), batch_size());
    for p in 0..DEPTH {
        let results: Vec<(usize, f64)> = (0..8u64)
            .into_par_iter()
            .map(|seed| {
                let mut task = task(ds);
                task.planted = vec![p];
                
                let (train, val, _) = generate_planted(&task, seed).unwrap();
                let mut model = planted_base_model(&task, rank(), seed).unwrap();
                let cfg = run_cfg(t, k, et, ea, seed);
                let (sel, _) = run_selection(&mut model, &train, &val, &cfg).unwrap();
                let top = sel
                    .alpha_final
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap();
                (top.0, sel.alpha_final[p])
            })
            .collect();
        let hits = results.iter().filter(|(top, _)| *top == p).count();
        let mean_ap: f64 = results.iter().map(|(_, a)| a).sum::<f64>() / 8.0;
        println!("  plant {p}: top1 hits={hits}/8 mean alpha[p]={mean_ap:+.3}");
    }
}

fn traj(ds: f64, et: f64, ea: f64, t: usize, k: usize, seed: u64) {
    let task = task(ds);
    let (train, val, _) = generate_planted(&task, seed).unwrap();
    let mut model = planted_base_model(&task, rank(), seed).unwrap();
    let cfg = run_cfg(t, k, et, ea, seed);
    let (sel, log) = run_selection(&mut model, &train, &val, &cfg).unwrap();
    println!("planted={:?} selected={:?}", task.planted, sel.selected);
    let stride = (t / 20).max(1);
    for row in log.rows.iter().step_by(stride).chain(log.rows.last()) {
        let a: Vec<String> = row.alpha.iter().map(|v| format!("{v:+.2}")).collect();
        println!(
            "  t={:4} train={:.3e} val={:.3e} alpha=[{}]",
            row.step,
            row.train_loss,
            row.val_loss,
            a.join(" ")
        );
    }
}

fn bias(et: f64, ea: f64, t: usize) {
    // delta_scale ~ 0: no planted signal at all, so any consistent gate
    // drift is pure positional bias of the dynamics.
    for bs in [0.75f64, 1.0, 1.5, 2.0] {
        BASE_SCALE.store(bs.to_bits(), std::sync::atomic::Ordering::Relaxed);
        let alphas: Vec<Vec<f64>> = (0..20u64)
            .into_par_iter()
            .map(|seed| select_once(1e-9, t, 8, et, ea, seed).1)
            .collect();
        let mut mean = vec![0.0; DEPTH];
        let mut meanabs = vec![0.0; DEPTH];
        for a in &alphas {
            for (i, v) in a.iter().enumerate() {
                mean[i] += v / 20.0;
                meanabs[i] += v.abs() / 20.0;
            }
        }
        let m: Vec<String> = mean.iter().map(|v| format!("{v:+.2}")).collect();
        let ma: Vec<String> = meanabs.iter().map(|v| format!("{v:.2}")).collect();
        println!("base_scale={bs}: mean=[{}] mean|a|=[{}]", m.join(" "), ma.join(" "));
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Ok(b) = std::env::var("CALIB_BATCH") {
        BATCHES.store(b.parse().unwrap(), std::sync::atomic::Ordering::Relaxed);
    }
    if let Ok(bs) = std::env::var("CALIB_BASE") {
        let v: f64 = bs.parse().unwrap();
        BASE_SCALE.store(v.to_bits(), std::sync::atomic::Ordering::Relaxed);
    }
    if std::env::var("CALIB_RELU").is_ok() {
        RELU.store(true, std::sync::atomic::Ordering::Relaxed);
    }
    if let Ok(r) = std::env::var("CALIB_RANK") {
        RANK_A.store(r.parse().unwrap(), std::sync::atomic::Ordering::Relaxed);
    }
    if let Ok(r) = std::env::var("CALIB_TRANK") {
        TRANK.store(r.parse().unwrap(), std::sync::atomic::Ordering::Relaxed);
    }
    if let Ok(pl) = std::env::var("CALIB_PLANT") {
        let v: Vec<usize> = pl.split(',').map(|x| x.parse().unwrap()).collect();
        PLANT.set(v).unwrap();
    }
    if let Ok(d) = std::env::var("CALIB_DIM") {
        DIMV.store(d.parse().unwrap(), std::sync::atomic::Ordering::Relaxed);
    }
    if let Ok(d) = std::env::var("CALIB_IO") {
        IOV.store(d.parse().unwrap(), std::sync::atomic::Ordering::Relaxed);
    }
    if std::env::var("CALIB_LINOUT").is_ok() {
        LINOUT.store(true, std::sync::atomic::Ordering::Relaxed);
    }
    if let Ok(d) = std::env::var("CALIB_NTRAIN") {
        NTRAIN.store(d.parse().unwrap(), std::sync::atomic::Ordering::Relaxed);
    }
    if let Ok(d) = std::env::var("CALIB_NVAL") {
        NVAL.store(d.parse().unwrap(), std::sync::atomic::Ordering::Relaxed);
    }
    match args.first().map(String::as_str) {
        Some("grid") => grid(),
        Some("bias") => {
            let et: f64 = args[1].parse().unwrap();
            let ea: f64 = args[2].parse().unwrap();
            let t: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
            bias(et, ea, t);
        }
        Some("traj") => {
            let ds: f64 = args[1].parse().unwrap();
            let et: f64 = args[2].parse().unwrap();
            let ea: f64 = args[3].parse().unwrap();
            let t: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(300);
            let k: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
            let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0);
            traj(ds, et, ea, t, k, seed);
        }
        Some("solo") => {
            let ds: f64 = args[1].parse().unwrap();
            let et: f64 = args[2].parse().unwrap();
            let ea: f64 = args[3].parse().unwrap();
            let t: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(300);
            let k: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
            solo(ds, et, ea, t, k);
        }
        Some("orank") => {
            let ds: f64 = args[1].parse().unwrap();
            let fe: usize = args[2].parse().unwrap();
            let fh: f64 = args[3].parse().unwrap();
            let fb: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(128);
            orank(ds, fe, fh, fb);
        }
        Some("margin") => {
            let ds: f64 = args[1].parse().unwrap();
            let fe: usize = args[2].parse().unwrap();
            let fh: f64 = args[3].parse().unwrap();
            let fb: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(128);
            margin(ds, fe, fh, fb);
        }
        Some("screen") => {
            let ds: f64 = args[1].parse().unwrap();
            let et: f64 = args[2].parse().unwrap();
            let ea: f64 = args[3].parse().unwrap();
            screen(ds, et, ea);
        }
        Some("util") => {
            let ds: f64 = args[1].parse().unwrap();
            let et: f64 = args[2].parse().unwrap();
            let ea: f64 = args[3].parse().unwrap();
            let k: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);
            let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
            util(ds, et, ea, k, seed);
        }
        Some("grid7") => {
            let ds: f64 = args[1].parse().unwrap();
            let et: f64 = args[2].parse().unwrap();
            let ea: f64 = args[3].parse().unwrap();
            grid7(ds, et, ea);
        }
        Some("peek") => {
            let ds: f64 = args[1].parse().unwrap();
            let et: f64 = args[2].parse().unwrap();
            let ea: f64 = args[3].parse().unwrap();
            let t: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(300);
            let k: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
            peek(ds, et, ea, t, k);
        }
        Some("check") => {
            let ds: f64 = args[1].parse().unwrap();
            let et: f64 = args[2].parse().unwrap();
            let ea: f64 = args[3].parse().unwrap();
            let fe: usize = args[4].parse().unwrap();
            let fh: f64 = args[5].parse().unwrap();
            check(ds, et, ea, fe, fh);
        }
        _ => eprintln!("usage: calib grid | calib check <delta_scale> <eta_theta> <eta_alpha> <ft_epochs> <ft_eta>"),
    }
}
