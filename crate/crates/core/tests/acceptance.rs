//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Positional arguments select criteria by
//! number, e.g. `cargo test --release --test acceptance -- 3 5`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segprune::attention::{
    entropy_loss_node, row_entropy, ssa_loss_node, sym_loss, sym_loss_node, transformer_block, AttentionHeadParams,
    BlockNodes, EntropyReduce, SsaConfig, TransformerBlockParams,
};
use segprune::autograd::{softmax_rows, Graph};
use segprune::data::{generate, Dataset, SyntheticSpec};
use segprune::exec::Exec;
use segprune::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use segprune::grpe::{gaussian_prior, grpe_embed, grpe_node, relative_index, Grid, GrpeParams};
use segprune::metrics::MetricSet;
use segprune::model::{ForwardOptions, Model, ModelConfig, SegSample};
use segprune::pruning::{
    adaptive_thresholds_node, apply_mask_renorm, apply_mask_renorm_node, flops_psa, flops_sa, gate_loss, gate_loss_node,
    gate_probs_node, instrumented_pruned_head, mask_from_thresholds, pruned_block_node, FlopsMode, PruneConfig,
    PruneContext, PruneDecision, PruneNodes,
};
use segprune::train::{evaluate, history_csv, train, RoundRecord, TrainConfig, TrainOptions};
use segprune::Tensor;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_fn([r, c], |_| rng.gen_range(-scale..scale))
}

fn head(rng: &mut ChaCha8Rng, grid: Grid, d: usize, d_m: usize) -> AttentionHeadParams {
    let table = (0..grid.table_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    AttentionHeadParams {
        e_q: rand_matrix(rng, d, d_m, 1.0),
        e_k: rand_matrix(rng, d, d_m, 1.0),
        e_v: rand_matrix(rng, d, d_m, 1.0),
        e_o: rand_matrix(rng, d_m, d_m, 1.0),
        grpe: GrpeParams::new(grid, rng.gen_range(0.5..3.0), table).unwrap(),
    }
}

fn block(rng: &mut ChaCha8Rng, grid: Grid, d: usize, heads: usize) -> TransformerBlockParams {
    let d_m = d / heads;
    TransformerBlockParams {
        heads: (0..heads).map(|_| head(rng, grid, d, d_m)).collect(),
        w_msa: rand_matrix(rng, d, d, 0.5),
        w_1: rand_matrix(rng, d, 2 * d, 0.5),
        b_1: rand_matrix(rng, 1, 2 * d, 0.5),
        w_2: rand_matrix(rng, 2 * d, d, 0.5),
        b_2: rand_matrix(rng, 1, d, 0.5),
    }
}

fn worst(r: &GradCheckReport) -> f64 {
    r.worst().map(|w| w.rel_err).unwrap_or(0.0)
}

// 1 ---------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut module: Vec<(&str, f64)> = Vec::new();
    let cfg = GradCheckConfig::default();
    let ssa = SsaConfig {
        alpha_sym: 0.0,
        alpha_en: 0.1,
        ..Default::default()
    };

    let logits = rand_matrix(&mut rng, 7, 7, 2.0);
    let through_softmax: [(&str, usize); 3] = [("sym", 0), ("entropy", 1), ("ssa", 2)];
    for (name, which) in through_softmax {
        let r = grad_check(
            |g, p| {
                let a = g.softmax_rows(p[0])?;
                match which {
                    0 => sym_loss_node(g, a, 0.0),
                    1 => entropy_loss_node(g, a, 0.1, EntropyReduce::Min),
                    _ => ssa_loss_node(g, a, &ssa),
                }
            },
            std::slice::from_ref(&logits),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        module.push((name, worst(&r)));
    }

    let grid = Grid::new(3, 4).unwrap();
    let weights = rand_matrix(&mut rng, 12, 12, 1.0);
    let r = grad_check(
        |g, p| {
            let e = grpe_node(g, grid, p[0], p[1])?;
            let w = g.constant(weights.clone());
            let m = g.mul(e, w)?;
            Ok(g.sum_all(m))
        },
        &[Tensor::scalar(0.7f64.ln()), rand_matrix(&mut rng, 1, grid.table_len(), 0.3)],
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    module.push(("grpe", worst(&r)));

    let f = rand_matrix(&mut rng, 6, 4, 1.0);
    let patch = [0u8, 1, 1, 0, 1, 0];
    let r = grad_check(
        |g, p| {
            let x = g.constant(f.clone());
            let gb = gate_probs_node(g, x, p[0], p[1])?;
            gate_loss_node(g, gb, &patch)
        },
        &[rand_matrix(&mut rng, 4, 1, 1.0), rand_matrix(&mut rng, 4, 1, 1.0)],
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    module.push(("gate", worst(&r)));

    let logits = rand_matrix(&mut rng, 4, 6, 2.0);
    let tw = rand_matrix(&mut rng, 4, 1, 1.0);
    let r = grad_check(
        |g, p| {
            let a = g.softmax_rows(p[0])?;
            let t = adaptive_thresholds_node(g, a, p[1], p[2], p[3])?;
            let w = g.constant(tw.clone());
            let m = g.mul(t, w)?;
            Ok(g.sum_all(m))
        },
        &[logits.clone(), rand_matrix(&mut rng, 4, 3, 1.0), rand_matrix(&mut rng, 3, 1, 1.0), Tensor::scalar(-0.7)],
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    module.push(("thresholds", worst(&r)));

    let a = softmax_rows(&logits).unwrap();
    let t: Vec<f64> = (0..4)
        .map(|i| {
            let row = a.row(i);
            let lo = row.iter().cloned().fold(f64::MAX, f64::min);
            let hi = row.iter().cloned().fold(f64::MIN, f64::max);
            lo + 0.3 * (hi - lo)
        })
        .collect();
    let mask = mask_from_thresholds(&a, &t).unwrap();
    let ow = rand_matrix(&mut rng, 4, 6, 1.0);
    let r = grad_check(
        |g, p| {
            let a = g.softmax_rows(p[0])?;
            let r = apply_mask_renorm_node(g, a, &mask)?;
            let w = g.constant(ow.clone());
            let m = g.mul(r, w)?;
            Ok(g.sum_all(m))
        },
        &[logits],
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    module.push(("renorm", worst(&r)));

    // tiny end-to-end model with both pruning stages active
    let mcfg = ModelConfig {
        prune: PruneConfig {
            g_init: 1.0,
            ..Default::default()
        },
        ..ModelConfig::tiny()
    };
    let mut m = Model::new(mcfg.clone(), 14).unwrap();
    for name in ["block0.gate.w_b", "block0.gate.w_f", "block0.head0.w_t", "block0.head1.w_t"] {
        let id = m.store.find(name).unwrap();
        m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let s = generate(
        &SyntheticSpec {
            count: 1,
            height: 16,
            width: 16,
            seed: 16,
            ..Default::default()
        },
        Exec::Sequential,
    )
    .unwrap()
    .remove(0);
    let (_, diag) = m.forward(&s.image, ForwardOptions::default()).map_err(|e| e.to_string())?;
    let frozen: Vec<PruneDecision> = diag.blocks.iter().map(|b| b.decision.clone()).collect();
    let params: Vec<Tensor> = m.store.iter().map(|(_, _, t)| t.clone()).collect();
    let opts = ForwardOptions {
        warmup_active: false,
        frozen: Some(&frozen),
    };
    let e2e = grad_check(
        |g, p| {
            let tr = m.forward_node(g, p, &s.image, opts)?;
            Ok(m.loss_node(g, &tr, &s.mask)?.total)
        },
        &params,
        &GradCheckConfig {
            sample: Some(240),
            seed: 17,
            eps: 1e-6,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;

    let elapsed = start.elapsed();
    let module_ok = module.iter().all(|&(_, e)| e <= 1e-5);
    let e2e_ok = e2e.entries.len() >= 200 && e2e.passed(1e-4);
    let listing: Vec<String> = module.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        module_ok && e2e_ok && elapsed < Duration::from_secs(120),
        format!(
            "module max rel err [{}] (≤1e-5); end-to-end {} entries, max {:.1e} (≤1e-4), pruned α={:.2} λ={:.2}; {:.1}s",
            listing.join(", "),
            e2e.entries.len(),
            worst(&e2e),
            frozen[0].measured_alpha,
            frozen[0].measured_lambda,
            elapsed.as_secs_f64()
        ),
    )
}

// 2 ---------------------------------------------------------------------------

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut rows, mut lo, mut hi) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
    let mut failures = 0usize;
    while rows < 10_000 {
        let (r, n) = (rng.gen_range(1..20), rng.gen_range(1..40));
        let scale = rng.gen_range(0.1..8.0);
        let a = softmax_rows(&rand_matrix(&mut rng, r, n, scale)).unwrap();
        let t: Vec<f64> = (0..r)
            .map(|i| {
                let row = a.row(i);
                let mn = row.iter().cloned().fold(f64::MAX, f64::min);
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                mn + rng.gen_range(0.0..=1.0) * (mx - mn)
            })
            .collect();
        let (out, mask) = apply_mask_renorm(&a, &t).unwrap();
        for i in 0..r {
            let (o, m, src) = (out.row(i), mask.row(i), a.row(i));
            let s: f64 = o.iter().sum();
            lo = lo.min(s);
            hi = hi.max(s);
            let argmax = (0..n).fold(0, |b, j| if src[j] > src[b] { j } else { b });
            let zeros_match = (0..n).all(|j| (o[j] == 0.0) == (m[j] == 0.0));
            if !(0.999..=1.0).contains(&s) || o[argmax] <= 0.0 || !zeros_match {
                failures += 1;
            }
            rows += 1;
        }
    }
    check(
        failures == 0,
        format!("{rows} rows, row sums in [{lo:.7}, {hi:.7}], {failures} rows violating sum/argmax/zero-pattern"),
    )
}

// 3 ---------------------------------------------------------------------------

fn flop_oracle() -> Outcome {
    let reference = flops_sa(256, 128, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut identity_fail = 0;
    for _ in 0..100 {
        let (n, d, dm) = (rng.gen_range(1..2000), rng.gen_range(1..1000), rng.gen_range(1..200));
        if flops_psa(n, d, dm, 0.0, 0.0, FlopsMode::KeptFraction) != flops_sa(n, d, dm) {
            identity_fail += 1;
        }
    }
    let mut kernel_fail = 0;
    for _ in 0..20 {
        let grid = Grid::new(rng.gen_range(1..6), rng.gen_range(1..6)).unwrap();
        let n = grid.n();
        let (d, d_m) = (rng.gen_range(1..9), rng.gen_range(1..6));
        let h = head(&mut rng, grid, d, d_m);
        let f = rand_matrix(&mut rng, n, d, 1.0);
        let bias = grpe_embed(&h.grpe).unwrap();
        let mut kept: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.6)).collect();
        if kept.is_empty() {
            kept.push(rng.gen_range(0..n));
        }
        let mask = Tensor::from_fn([kept.len(), n], |_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
        let (_, mults) = instrumented_pruned_head(&f, &kept, &h, &bias, Some(&mask)).unwrap();
        let dec = PruneDecision::new(n, kept, vec![mask], vec![]);
        let want = flops_psa(n as u64, d as u64, d_m as u64, dec.measured_alpha, dec.measured_lambda, FlopsMode::KeptFraction);
        if mults != want {
            kernel_fail += 1;
        }
    }
    check(
        reference == 15_728_640 && identity_fail == 0 && kernel_fail == 0,
        format!(
            "flops_sa(256,128,64) = {reference}; psa(0,0) ≠ sa in {identity_fail}/100 triples; kernel count ≠ formula in {kernel_fail}/20 decisions"
        ),
    )
}

// 4 ---------------------------------------------------------------------------

fn grpe_brute_force() -> Outcome {
    let mut bad = Vec::new();
    for h in 1..=16 {
        for w in 1..=16 {
            let grid = Grid::new(h, w).unwrap();
            let n = grid.n();
            // displacement (dr, dc) → index, offset so both are non-negative
            let mut by_disp = vec![usize::MAX; (2 * h - 1) * (2 * w - 1)];
            let mut by_index = vec![usize::MAX; 4 * n];
            for i in 0..n {
                for j in 0..n {
                    let idx = relative_index(i, j, grid).unwrap();
                    if idx == 0 || idx > 4 * n - 1 {
                        bad.push(format!("{h}x{w} ({i},{j}) -> {idx} out of range"));
                        continue;
                    }
                    let (ri, ci) = (i / w, i % w);
                    let (rj, cj) = (j / w, j % w);
                    let disp = (ri + h - 1 - rj) * (2 * w - 1) + (ci + w - 1 - cj);
                    if by_disp[disp] == usize::MAX {
                        by_disp[disp] = idx;
                    } else if by_disp[disp] != idx {
                        bad.push(format!("{h}x{w}: displacement of ({i},{j}) maps to two indices"));
                    }
                    if by_index[idx] == usize::MAX {
                        by_index[idx] = disp;
                    } else if by_index[idx] != disp {
                        bad.push(format!("{h}x{w}: index {idx} shared by two displacements"));
                    }
                }
            }
            let g = gaussian_prior(grid, default_width(grid)).unwrap();
            for i in 0..n {
                if g.at(i, i) != 1.0 {
                    bad.push(format!("{h}x{w}: G[{i},{i}] = {}", g.at(i, i)));
                }
                for j in 0..i {
                    if g.at(i, j) != g.at(j, i) {
                        bad.push(format!("{h}x{w}: G not symmetric at ({i},{j})"));
                    }
                }
            }
        }
    }
    check(
        bad.is_empty(),
        if bad.is_empty() {
            "all 256 grids up to 16x16: indices in [1, 4N-1], one index per displacement, G symmetric with unit diagonal".into()
        } else {
            format!("{} violations, first: {}", bad.len(), bad[0])
        },
    )
}

fn default_width(grid: Grid) -> f64 {
    grid.h.max(grid.w) as f64 / 4.0
}

// 5 ---------------------------------------------------------------------------

fn no_pruning_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cfg = PruneConfig::disabled();
    let mut mismatches = 0;
    for _ in 0..50 {
        let grid = Grid::new(rng.gen_range(1..5), rng.gen_range(2..5)).unwrap();
        let n = grid.n();
        let heads = rng.gen_range(1..4);
        let d = heads * rng.gen_range(1..5);
        let b = block(&mut rng, grid, d, heads);
        let f = rand_matrix(&mut rng, n, d, 1.0);
        let want = transformer_block(&f, &b).unwrap();
        for with_gate in [false, true] {
            let mut g = Graph::new();
            let nodes = BlockNodes::bind(&mut g, &b, false).unwrap();
            let pn = with_gate.then(|| PruneNodes {
                w_b: g.constant(rand_matrix(&mut rng, d, 1, 1.0)),
                w_f: g.constant(rand_matrix(&mut rng, d, 1, 1.0)),
                w_t: (0..heads).map(|_| g.constant(rand_matrix(&mut rng, d / heads, 1, 1.0))).collect(),
                g: g.constant(Tensor::scalar(-2.0)),
            });
            let x = g.constant(f.clone());
            let ctx = PruneContext {
                cfg: &cfg,
                warmup_active: false,
                frozen: None,
            };
            let tr = pruned_block_node(&mut g, x, &nodes, pn.as_ref(), ctx).unwrap();
            if g.value(tr.out) != &want {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("50 random blocks x {{no gate, gate}}: {mismatches} outputs differ bitwise"))
}

// 6 ---------------------------------------------------------------------------

fn loss_fixtures() -> Outcome {
    let sym = Tensor::new([3, 3], vec![0.5, 0.3, 0.2, 0.3, 0.4, 0.3, 0.2, 0.3, 0.5]).unwrap();
    let l_sym = sym_loss(&sym, 0.0).unwrap();
    let uniform = Tensor::full([4, 5], 0.2);
    let e_uniform = (0..4).map(|i| row_entropy(&uniform, i).unwrap()).fold(0.0f64, |m, e| m.max((e - 1.0).abs()));
    let half = Tensor::new([1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let e_half = row_entropy(&half, 0).unwrap();
    let ce = gate_loss(&[0.5], &[0.5], &[0]).unwrap();
    let ce_fg = gate_loss(&[0.5], &[0.5], &[1]).unwrap();
    let ln2 = std::f64::consts::LN_2;
    check(
        l_sym == 0.0 && e_uniform <= 1e-12 && (e_half - 0.5).abs() <= 1e-12 && (ce - ln2).abs() <= 1e-9 && (ce_fg - ln2).abs() <= 1e-9,
        format!("L_sym(sym) = {l_sym}; |E(uniform) - 1| ≤ {e_uniform:.1e}; E([.5,.5,0,0]) = {e_half}; gate CE = {ce} / {ce_fg}"),
    )
}

// 7 ---------------------------------------------------------------------------

struct TestStats {
    metrics: MetricSet,
    flops_ratio: f64,
    alpha: f64,
    lambda: f64,
}

fn test_stats(model: &Model, data: &[SegSample]) -> TestStats {
    let exec = Exec::default();
    let per = exec
        .try_map(data, |s| {
            model.forward(&s.image, ForwardOptions::default()).map(|(_, d)| {
                let k = d.blocks.len().max(1) as f64;
                let a = d.blocks.iter().map(|b| b.decision.measured_alpha).sum::<f64>() / k;
                let l = d.blocks.iter().map(|b| b.decision.measured_lambda).sum::<f64>() / k;
                (d.sa_flops() as f64 / d.sa_flops_unpruned() as f64, a, l)
            })
        })
        .unwrap();
    let k = per.len() as f64;
    TestStats {
        metrics: evaluate(model, data, exec).unwrap(),
        flops_ratio: per.iter().map(|p| p.0).sum::<f64>() / k,
        alpha: per.iter().map(|p| p.1).sum::<f64>() / k,
        lambda: per.iter().map(|p| p.2).sum::<f64>() / k,
    }
}

/// Optimizer steps per round for the trend runs (one round = 5 batches of 4).
const TREND_STEPS: usize = 5;
const TREND_LR: f64 = 1e-3;

fn toy_training_trend() -> Outcome {
    let start = Instant::now();
    let ds = Dataset::split(
        generate(
            &SyntheticSpec {
                count: 500,
                seed: 0,
                ..Default::default()
            },
            Exec::default(),
        )
        .unwrap(),
    );
    let tc = TrainConfig {
        lr: TREND_LR,
        rounds: 200,
        steps_per_round: TREND_STEPS,
        seed: 0,
        ..Default::default()
    };
    let run = |prune: PruneConfig| -> (TestStats, Vec<RoundRecord>) {
        let cfg = ModelConfig {
            prune,
            ..Default::default()
        };
        let mut m = Model::new(cfg, 0).unwrap();
        let h = train(&mut m, &ds.train, &tc, &TrainOptions::default()).unwrap();
        (test_stats(&m, &ds.test), h)
    };
    let (base, _) = run(PruneConfig::disabled());
    let pcfg = PruneConfig::default();
    let warm = pcfg.g_frozen_rounds;
    let (pruned, hist) = run(pcfg);
    let elapsed = start.elapsed();

    let after: Vec<&RoundRecord> = hist.iter().filter(|r| r.round > warm).collect();
    let train_lambda = after.iter().map(|r| r.lambda).sum::<f64>() / after.len().max(1) as f64;
    let a = base.metrics.dice >= 0.90;
    let b = pruned.metrics.dice >= base.metrics.dice - 0.02;
    let c = pruned.flops_ratio <= 0.80;
    let d = pruned.lambda > 0.2;
    let budget = elapsed < Duration::from_secs(30 * 60);
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    check(
        a && b && c && d && budget,
        format!(
            "(a) unpruned test Dice {:.4} [{}]; (b) pruned {:.4} vs ≥ {:.4} [{}]; (c) SA FLOPs {:.1}% of unpruned [{}]; (d) λ {:.3} (train rounds >{warm}: {:.3}), α {:.3} [{}]; {:.0}s [{}]",
            base.metrics.dice,
            mark(a),
            pruned.metrics.dice,
            base.metrics.dice - 0.02,
            mark(b),
            100.0 * pruned.flops_ratio,
            mark(c),
            pruned.lambda,
            train_lambda,
            pruned.alpha,
            mark(d),
            elapsed.as_secs_f64(),
            mark(budget)
        ),
    )
}

// 8 ---------------------------------------------------------------------------

fn ssa_convergence() -> Outcome {
    let ds = Dataset::split(
        generate(
            &SyntheticSpec {
                count: 500,
                seed: 0,
                ..Default::default()
            },
            Exec::default(),
        )
        .unwrap(),
    );
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let mut loss = [0.0; 2];
        for (k, enabled) in [true, false].into_iter().enumerate() {
            let mut cfg = ModelConfig {
                prune: PruneConfig::disabled(),
                ..Default::default()
            };
            cfg.ssa.enabled = enabled;
            let mut m = Model::new(cfg, seed).unwrap();
            let tc = TrainConfig {
                lr: TREND_LR,
                rounds: 50,
                steps_per_round: 2,
                seed,
                ..Default::default()
            };
            let h = train(&mut m, &ds.train, &tc, &TrainOptions::default()).unwrap();
            loss[k] = h[49].l_seg;
        }
        if loss[0] < loss[1] {
            wins += 1;
        }
        pairs.push(format!("{:.4}/{:.4}", loss[0], loss[1]));
    }
    let note = if wins == 2 { " (2/5: trend only)" } else { "" };
    check(
        wins >= 2,
        format!("segmentation loss at round 50, SSA on/off per seed [{}]: lower with SSA in {wins}/5{note}", pairs.join(", ")),
    )
}

// 9 ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let run = |exec: Exec| -> String {
        let ds = Dataset::split(
            generate(
                &SyntheticSpec {
                    count: 30,
                    seed: 9,
                    ..Default::default()
                },
                exec,
            )
            .unwrap(),
        );
        let mut cfg = ModelConfig::default();
        cfg.prune.g_frozen_rounds = 2;
        let mut m = Model::new(cfg, 9).unwrap();
        let tc = TrainConfig {
            lr: TREND_LR,
            rounds: 4,
            steps_per_round: 2,
            seed: 9,
            ..Default::default()
        };
        let h = train(&mut m, &ds.train, &tc, &TrainOptions { exec, dump_dir: None }).unwrap();
        let ev = evaluate(&m, &ds.test, exec).unwrap();
        format!("{}{}\n{}\n", history_csv(&h), MetricSet::CSV_HEADER, ev.to_csv_row())
    };
    let a = run(Exec::default());
    let b = run(Exec::default());
    let c = run(Exec::Sequential);
    check(
        a == b && a == c,
        format!("train+eval CSV ({} bytes) identical across two runs and the sequential executor: {}", a.len(), a == b && a == c),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("masked re-normalization", normalization),
        ("FLOP oracle", flop_oracle),
        ("relative index brute force", grpe_brute_force),
        ("no-pruning equivalence", no_pruning_equivalence),
        ("loss fixtures", loss_fixtures),
        ("toy training trend", toy_training_trend),
        ("SSA convergence effect", ssa_convergence),
        ("determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let (status, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {id} {name}: {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
