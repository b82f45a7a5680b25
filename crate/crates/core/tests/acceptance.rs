//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.
//!
//! The long-running criteria (7 to 9) train on the default configuration
//! with the budget overrides in `BUDGET`. `ACCEPTANCE_OUT` keeps the run
//! directory (stages are content-addressed, so a rerun reuses them) and
//! `ACCEPTANCE_ONLY=1,2,10` restricts the run to some criteria.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use common::oracles::{exhaustive_ranking, small_vae, sq_dist, toy_group, toy_policy, FrozenOracle};
use common::fixture;
use minirec_autodiff::gradcheck::numeric_param_grads;
use minirec_autodiff::{Graph, Tensor};
use minirec_core::catalog::generate_catalog_with;
use minirec_core::config::{RunConfig, Variant};
use minirec_core::decode::{
    beam_search, constrained_log_prob, diversity, dynamic_draws, dynamic_sample, sample_raw, sample_top_k,
    SampleConfig, Scoring,
};
use minirec_core::eval::{evaluate_model, EvalConfig, MetricsReport, RunMeta};
use minirec_core::grpo::{grpo_loss, normalize_advantages, ranking_reward, ranking_reward_in_base, LossConfig};
use minirec_core::pipeline::Pipeline;
use minirec_core::policy::{Policy, PolicyConfig};
use minirec_core::sft::PromptBuilder;
use minirec_core::tokenizer::{fit_tokenizer, quantize, reconstruct};
use minirec_core::vocab::{VocabLayout, BOS, SEP};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Overrides on top of the default configuration for the training criteria;
/// everything else (data, tokenizer, architecture, losses) stays default.
const BUDGET: &str = "\
sft.epochs = 3
rl.epochs = 1
rl.max_prompts_per_epoch = 1024
rl.lr = 0.0001
";

const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    id: usize,
    pass: bool,
    detail: String,
    secs: f64,
}

/// Elementwise relative error with the denominator floored where central
/// differences bottom out in rounding noise.
fn grad_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

fn criterion_1() -> (bool, String) {
    const TOL: f64 = 1e-4;
    let mut errs = Vec::new();

    // policy: weighted completion log-likelihood, oracle through the KV cache
    let layout = VocabLayout::new(8, 3, 4, 2);
    let mut policy_err: f64 = 0.0;
    for tie in [true, false] {
        let cfg = PolicyConfig { n_layers: 2, width: 8, n_heads: 2, ff_width: 12, max_len: 16, seed: 3, tie_embeddings: tie };
        let p = Policy::init(cfg, layout.clone()).unwrap();
        let prompt = [BOS, 6, 14, SEP];
        let completions = [vec![13u32, 18, 21, 2], vec![14u32, 17, 2]];
        let weights = [0.7, -1.3];
        let mut g = Graph::new();
        let pairs: Vec<(&[u32], &[u32])> = completions.iter().map(|c| (&prompt[..], c.as_slice())).collect();
        let (lp, lens) = p.completion_log_probs(&mut g, p.store(), &pairs).unwrap();
        let per_token: Vec<f64> = lens.iter().zip(&weights).flat_map(|(&n, &w)| std::iter::repeat_n(w, n)).collect();
        let w = g.constant(Tensor::vector(per_token)).unwrap();
        let prod = g.mul(lp, w).unwrap();
        let obj = g.sum(prod).unwrap();
        let grads = g.backward(obj).unwrap().dense(p.store());
        let numeric = numeric_param_grads(p.store(), 1e-5, |s| {
            let q = p.with_store(s.clone()).unwrap();
            Ok(completions.iter().zip(&weights).map(|(c, w)| w * q.sequence_log_prob(&prompt, c).unwrap().1).sum())
        })
        .unwrap();
        policy_err = policy_err.max(grad_error(&grads, &numeric));
    }
    errs.push(("policy", policy_err));

    // RQ-VAE loss against a plain-f64 oracle with stop-gradients frozen
    let mut vae_err: f64 = 0.0;
    for beta in [0.25, 0.0] {
        let (vae, x) = small_vae(beta);
        let mut g = Graph::new();
        let loss = vae.loss_graph(&mut g, vae.store(), &x).unwrap();
        let oracle = FrozenOracle::new(&vae, x, beta);
        let grads = g.backward(loss.total).unwrap().dense(vae.store());
        let numeric = numeric_param_grads(vae.store(), 1e-6, |s| Ok(oracle.loss(s))).unwrap();
        vae_err = vae_err.max(grad_error(&grads, &numeric));
    }
    errs.push(("rq-vae", vae_err));

    // full GRPO loss with ratios inside and outside the clip range
    let policy = toy_policy(1);
    let group = toy_group(&policy, [1.0, -1.0], [0.02, -0.3], [0.05, -0.04]);
    let cfg = LossConfig { clip_eps: 0.2, beta_kl: 0.5 };
    let mut g = Graph::new();
    let (loss, _) = grpo_loss(&policy, &mut g, policy.store(), &[&group], &cfg).unwrap();
    let grads = g.backward(loss).unwrap().dense(policy.store());
    let numeric = numeric_param_grads(policy.store(), 1e-5, |s| {
        let mut g = Graph::new();
        let (l, _) = grpo_loss(&policy, &mut g, s, &[&group], &cfg).unwrap();
        Ok(g.value(l).item())
    })
    .unwrap();
    errs.push(("grpo", grad_error(&grads, &numeric)));

    let pass = errs.iter().all(|(_, e)| *e < TOL);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    (pass, format!("max relative error {detail} (tolerance {TOL:.0e})"))
}

fn criterion_2() -> (bool, String) {
    let defaults = RunConfig::default();
    let catalog = generate_catalog_with(0, &defaults.data.catalog_params()).unwrap();
    let fit = fit_tokenizer(&catalog, &defaults.tokenizer, 0).unwrap();
    let cb = &fit.codebook;
    let dim = catalog.dim();
    let x = catalog.embedding_matrix();

    let mut telescope: f64 = 0.0;
    for row in x.chunks_exact(dim) {
        let (codes, residual) = quantize(row, cb).unwrap();
        let xq = reconstruct(&codes, cb).unwrap();
        for ((a, r), e) in xq.iter().zip(&residual).zip(row) {
            telescope = telescope.max((a + r - e).abs());
        }
    }

    // greedy codes against a scan of every centroid at every level
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut argmin_mismatch = 0;
    for _ in 0..1000 {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (codes, _) = quantize(&v, cb).unwrap();
        let mut res = v.clone();
        for (l, &code) in codes.iter().enumerate() {
            let d: Vec<f64> = (0..cb.k()).map(|c| sq_dist(&res, cb.centroid(l, c))).collect();
            let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = d.iter().position(|&v| v == best).unwrap();
            argmin_mismatch += (first != code as usize) as usize;
            for (r, m) in res.iter_mut().zip(cb.centroid(l, first)) {
                *r -= m;
            }
        }
    }

    let trace = fit.kmeans_trace.as_ref().expect("default tokenizer is residual k-means");
    let sse_rises = trace
        .sse
        .iter()
        .flat_map(|s| s.windows(2))
        .filter(|w| w[1] > w[0] * (1.0 + 1e-12))
        .count();

    let mut mse = vec![0.0; cb.n_levels()];
    for row in x.chunks_exact(dim) {
        let (codes, _) = quantize(row, cb).unwrap();
        let mut acc = vec![0.0; dim];
        for (l, &code) in codes.iter().enumerate() {
            for (a, m) in acc.iter_mut().zip(cb.centroid(l, code as usize)) {
                *a += m;
            }
            mse[l] += sq_dist(&acc, row) / catalog.len() as f64;
        }
    }
    let decreasing = mse.windows(2).all(|w| w[1] < w[0]);

    let pass = telescope <= 1e-12 && argmin_mismatch == 0 && sse_rises == 0 && decreasing;
    (
        pass,
        format!(
            "telescoping max error {telescope:.1e} over {} items, argmin mismatches {argmin_mismatch}/1000, Lloyd SSE rises {sse_rises}, reconstruction MSE by level {}",
            catalog.len(),
            mse.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" > ")
        ),
    )
}

fn criterion_3() -> (bool, String) {
    let mut checked = 0;
    let mut mismatches = 0;
    let mut n_items = 0;
    for seed in [3u64, 4] {
        let mut f = fixture(48, 4, seed);
        f.skew(&[(&[1, 2], 5), (&[3], 9), (&[0], 7)], 20);
        let trie = &f.tries.sid;
        n_items = trie.n_items();
        for history in [&[1u32, 2][..], &[3], &[0, 6]] {
            let prompt = f.prompt(history);
            for scoring in [Scoring::Masked, Scoring::Raw] {
                let oracle = match scoring {
                    Scoring::Masked => {
                        exhaustive_ranking(trie, |c| constrained_log_prob(&f.policy, &prompt, c, trie, scoring).unwrap())
                    }
                    Scoring::Raw => exhaustive_ranking(trie, |c| f.policy.sequence_log_prob(&prompt, c).unwrap().1),
                };
                let group = beam_search(&f.policy, &prompt, n_items, trie, scoring).unwrap();
                let got: Vec<(u32, f64)> = group.candidates.iter().map(|c| (c.item, c.score)).collect();
                checked += 1;
                mismatches += (got != oracle) as usize;
            }
        }
    }
    (
        mismatches == 0,
        format!("{checked} full-width beams on {n_items}-item catalogs, {mismatches} differ from exhaustive enumeration"),
    )
}

fn criterion_4() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_sum, mut worst_base, mut worst_mean, mut worst_std): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let mut violations = 0;
    for _ in 0..10_000 {
        let g = rng.random_range(2..=32);
        let mut ranks: Vec<usize> = (1..=g).collect();
        ranks.shuffle(&mut rng);
        let target_slot = rng.random_range(0..g + 1);
        let is_target: Vec<bool> = (0..g).map(|i| i == target_slot).collect();
        let r = ranking_reward(&ranks, &is_target);
        for i in 0..g {
            if is_target[i] && r[i] != 0.0 {
                violations += 1;
            }
        }
        worst_sum = worst_sum.max((r.iter().sum::<f64>() + 1.0).abs());
        // strictly more negative for more probable negatives
        let mut neg: Vec<(usize, f64)> = (0..g).filter(|&i| !is_target[i]).map(|i| (ranks[i], r[i])).collect();
        neg.sort_by_key(|p| p.0);
        violations += neg.windows(2).filter(|w| w[0].1 >= w[1].1).count();
        for base in [2.0, 10.0] {
            let rb = ranking_reward_in_base(&ranks, &is_target, base);
            worst_base = worst_base.max(r.iter().zip(&rb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }

        let rule: Vec<f64> = is_target.iter().map(|&t| t as u8 as f64).collect();
        let total: Vec<f64> = rule.iter().zip(&r).map(|(a, b)| a + b).collect();
        let dense: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..2.0)).collect();
        for rewards in [total, dense] {
            let a = normalize_advantages(&rewards, 1e-6);
            let n = rewards.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let std = (rewards.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            if std < 1e-6 {
                continue;
            }
            let am = a.iter().sum::<f64>() / n;
            let asd = (a.iter().map(|x| (x - am).powi(2)).sum::<f64>() / n).sqrt();
            worst_mean = worst_mean.max(am.abs());
            worst_std = worst_std.max((asd - 1.0).abs());
        }
    }
    let pass = violations == 0 && worst_sum <= 1e-9 && worst_base <= 1e-12 && worst_mean <= 1e-12 && worst_std <= 1e-9;
    (
        pass,
        format!(
            "10000 groups: |sum+1| {worst_sum:.1e}, base change {worst_base:.1e}, advantage |mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, order violations {violations}"
        ),
    )
}

fn criterion_5() -> (bool, String) {
    let policy = toy_policy(2);
    let group = toy_group(&policy, [0.7, -0.7], [0.0, 0.0], [0.0, 0.0]);
    let cfg = LossConfig { clip_eps: 0.2, beta_kl: 0.04 };
    let mut g = Graph::new();
    let (loss, stats) = grpo_loss(&policy, &mut g, policy.store(), &[&group], &cfg).unwrap();
    let grads = g.backward(loss).unwrap().dense(policy.store());

    // oracle: -(1/G) sum_i (A_i / |y_i|) sum_t log pi(y_t)
    let mut g2 = Graph::new();
    let pairs: Vec<(&[u32], &[u32])> = group.completions.iter().map(|c| (group.prompt.as_slice(), c.as_slice())).collect();
    let (lp, lens) = policy.completion_log_probs(&mut g2, policy.store(), &pairs).unwrap();
    let ratios_one = g2
        .value(lp)
        .data()
        .iter()
        .zip(group.old_log_probs.concat())
        .all(|(a, b)| (a - b).exp() == 1.0);
    let n_groups = group.completions.len() as f64;
    let w: Vec<f64> = lens
        .iter()
        .zip(&group.advantages)
        .flat_map(|(&n, &a)| std::iter::repeat_n(-a / (n_groups * n as f64), n))
        .collect();
    let wv = g2.constant(Tensor::vector(w)).unwrap();
    let prod = g2.mul(lp, wv).unwrap();
    let oracle_loss = g2.sum(prod).unwrap();
    let oracle = g2.backward(oracle_loss).unwrap().dense(policy.store());
    let diff = grads.iter().zip(&oracle).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    let pass = ratios_one && stats.kl == 0.0 && diff <= 1e-8;
    (
        pass,
        format!("ratios all 1: {ratios_one}, KL estimate {:e}, gradient difference {diff:.1e} (tolerance 1e-8)", stats.kl),
    )
}

fn criterion_6() -> (bool, String) {
    let f = fixture(40, 4, 15);
    let cfg = SampleConfig::default();
    let mut beam_ok = true;
    let mut topk_ok = true;
    let mut draws_ok = true;
    for (i, history) in [&[1u32, 2][..], &[3], &[5, 6, 7]].iter().enumerate() {
        let prompt = f.prompt(history);
        for g in [4, 8, 16] {
            let beam = beam_search(&f.policy, &prompt, g, &f.tries.sid, Scoring::Masked).unwrap();
            beam_ok &= diversity(&beam.items()).ratio == 1.0;
            for seed in 0..10u64 {
                let s = seed + 100 * i as u64;
                let group = sample_top_k(&f.policy, &prompt, g, &f.tries.sid, &cfg, Scoring::Masked, s).unwrap();
                let items = group.items();
                let unique: BTreeSet<u32> = items.iter().copied().collect();
                topk_ok &= diversity(&items).ratio == unique.len() as f64 / g as f64;

                let expect = (1.5 * g as f64).ceil() as usize;
                let dynamic = dynamic_sample(&f.policy, &prompt, g, None, &f.tries.sid, &cfg, Scoring::Masked, s).unwrap();
                let raw = sample_raw(&f.policy, &prompt, expect, &f.tries.sid, &cfg, Scoring::Masked, s).unwrap();
                let raw_items: BTreeSet<u32> = raw.iter().map(|c| c.item).collect();
                draws_ok &= dynamic_draws(g) == expect
                    && dynamic.draws == expect
                    && dynamic.len() == g
                    && dynamic.items().iter().all(|i| raw_items.contains(i));
            }
        }
    }
    let odd_ok = (2..=64).all(|g| dynamic_draws(g) == (3 * g).div_ceil(2));
    let pass = beam_ok && topk_ok && draws_ok && odd_ok;
    (
        pass,
        format!("beam diversity exactly 1: {beam_ok}, top-k unique/G matches count: {topk_ok}, dynamic draws ceil(1.5G): {}", draws_ok && odd_ok),
    )
}

/// Trained runs for every seed, shared by criteria 7 to 10.
struct Runs {
    out: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    reports: Vec<MetricsReport>,
}

impl Runs {
    fn new() -> Self {
        match std::env::var_os("ACCEPTANCE_OUT") {
            Some(dir) => Self { out: PathBuf::from(dir), _tmp: None, reports: Vec::new() },
            None => {
                let tmp = tempfile::tempdir().unwrap();
                Self { out: tmp.path().to_path_buf(), _tmp: Some(tmp), reports: Vec::new() }
            }
        }
    }

    fn pipeline(&self, seed: u64, variant: &str) -> Pipeline {
        let mut cfg = RunConfig::parse(BUDGET).unwrap();
        cfg.seed = seed;
        cfg.out = self.out.clone();
        Pipeline::new(Variant::from_name(variant).unwrap().apply(&cfg).unwrap())
    }

    /// Data, tokenizer and SFT for one seed and variant; reused when built.
    fn trained(&self, seed: u64, variant: &str) -> Pipeline {
        let p = self.pipeline(seed, variant);
        p.gen_data().unwrap();
        p.train_tokenizer().unwrap();
        p.sft().unwrap();
        p
    }

    fn keep(&mut self, r: &MetricsReport) {
        self.reports.push(r.clone());
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

fn criterion_7(runs: &mut Runs) -> (bool, String) {
    let (mut sft, mut pop) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let p = runs.trained(seed, "full");
        // evaluation before RL exists: popularity and SFT only
        let s = p.eval().unwrap();
        sft.push(s.sft.hr_at(10));
        pop.push(s.popularity.hr_at(10));
        runs.keep(&s.popularity);
        runs.keep(&s.sft);
    }
    let ratio = mean(&sft) / mean(&pop);
    (
        ratio >= 5.0,
        format!("SFT HR@10 {} vs popularity {}; mean ratio {ratio:.2} (needs >= 5)", fmt(&sft), fmt(&pop)),
    )
}

fn criterion_8(runs: &mut Runs) -> (bool, String) {
    let (mut sft, mut rank, mut rule) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        for variant in ["full", "reward=rule_only"] {
            let p = runs.trained(seed, variant);
            p.rl().unwrap();
            let s = p.eval().unwrap();
            let rl = s.rl.clone().expect("RL stage exists");
            if variant == "full" {
                sft.push(s.sft.ndcg_at(10));
                rank.push(rl.ndcg_at(10));
                runs.keep(&s.sft);
            } else {
                rule.push(rl.ndcg_at(10));
            }
            runs.keep(&rl);
        }
    }
    let gain_sft = mean(&rank) - mean(&sft);
    let gain_rule = mean(&rank) - mean(&rule);
    (
        gain_sft >= 0.0 && gain_rule >= 0.0,
        format!(
            "NDCG@10 rule+rank {} vs SFT {} vs rule-only {}; mean gain over SFT {gain_sft:+.4}, over rule-only {gain_rule:+.4} (each needs >= 0)",
            fmt(&rank),
            fmt(&sft),
            fmt(&rule)
        ),
    )
}

fn criterion_9(runs: &mut Runs) -> (bool, String) {
    let (mut full, mut none) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        for variant in ["full", "no-align"] {
            let p = runs.trained(seed, variant);
            p.rl().unwrap();
            let s = p.eval().unwrap();
            let hr = s.final_report().hr_at(10);
            if variant == "full" {
                full.push(hr);
            } else {
                none.push(hr);
                runs.keep(s.final_report());
            }
        }
    }
    let gain = mean(&full) - mean(&none);
    (
        gain >= 0.0,
        format!("HR@10 full alignment {} vs no alignment {}; mean gain {gain:+.4} (needs >= 0)", fmt(&full), fmt(&none)),
    )
}

/// HR@10 of a freshly initialized policy, the chance rate and the number of
/// test examples.
fn untrained_hr(runs: &mut Runs) -> (f64, f64, usize) {
    let p = runs.pipeline(0, "full");
    p.gen_data().unwrap();
    p.train_tokenizer().unwrap();
    let data = p.load_data().unwrap();
    let tok = p.load_tokenizer(&data.catalog).unwrap();
    let policy = Policy::init(p.config.policy_config(), tok.layout.clone()).unwrap();
    let pb = PromptBuilder {
        catalog: &data.catalog,
        sids: &tok.sids,
        layout: &tok.layout,
        max_len: p.config.policy.max_len,
    };
    let meta = RunMeta { run_id: "untrained".into(), stage: "untrained".into(), seed: 0, config_hash: p.config.hash() };
    let eval = EvalConfig { ks: vec![1, 3, 5, 10, 16], ..EvalConfig::default() };
    let r = evaluate_model(&policy, &data.split.test, &pb, &tok.tries.sid, &eval, &meta).unwrap();
    runs.keep(&r);
    (r.hr_at(10), 10.0 / data.catalog.len() as f64, r.n_examples)
}

fn criterion_10(runs: &mut Runs) -> (bool, String) {
    let (hr, p, n) = untrained_hr(runs);
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let z = (hr - p) / sigma;
    let monotone = |r: &MetricsReport| {
        let hr: Vec<f64> = r.hr.values().copied().collect();
        let nd: Vec<f64> = r.ndcg.values().copied().collect();
        hr.windows(2).all(|w| w[0] <= w[1])
            && nd.windows(2).all(|w| w[0] <= w[1])
            && hr.iter().zip(&nd).all(|(h, d)| d <= h)
    };
    let bad: Vec<String> = runs.reports.iter().filter(|r| !monotone(r)).map(|r| r.stage.clone()).collect();
    let pass = z.abs() <= 3.0 && bad.is_empty();
    (
        pass,
        format!(
            "untrained HR@10 {hr:.4} vs chance {p:.4} ({z:+.2} sigma over {n} examples); {} reports monotone in K, {} not",
            runs.reports.len() - bad.len(),
            bad.len()
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|s| s.contains(&id));
    let names = [
        "",
        "gradient integrity",
        "residual-quantization identities",
        "decoding oracle",
        "reward and advantage algebra",
        "GRPO identity step",
        "diversity contract",
        "end-to-end SFT learning",
        "end-to-end RL gain",
        "alignment ablation",
        "metric sanity",
    ];
    // minutes allowed per criterion
    let budget = [0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 30.0, 30.0, 45.0, 1.0];

    let mut lines: Vec<Line> = Vec::new();
    let run = |id: usize, f: &mut dyn FnMut() -> (bool, String), lines: &mut Vec<Line>| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let (pass, detail) = f();
        let secs = t.elapsed().as_secs_f64();
        let line = Line { id, pass, detail, secs };
        print_line(&line, names[id], budget[id]);
        lines.push(line);
    };

    run(1, &mut criterion_1, &mut lines);
    run(2, &mut criterion_2, &mut lines);
    run(3, &mut criterion_3, &mut lines);
    run(4, &mut criterion_4, &mut lines);
    run(5, &mut criterion_5, &mut lines);
    run(6, &mut criterion_6, &mut lines);

    let mut runs = Runs::new();
    run(7, &mut || criterion_7(&mut runs), &mut lines);
    run(8, &mut || criterion_8(&mut runs), &mut lines);
    run(9, &mut || criterion_9(&mut runs), &mut lines);
    run(10, &mut || criterion_10(&mut runs), &mut lines);

    println!();
    println!("acceptance summary");
    let mut failed = 0;
    for l in &lines {
        let within = l.secs <= budget[l.id] * 60.0;
        let ok = l.pass && within;
        failed += !ok as usize;
        println!(
            "criterion {:>2} {}: {} ({:.1} s)",
            l.id,
            if ok { "PASS" } else { "FAIL" },
            names[l.id],
            l.secs
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn print_line(l: &Line, name: &str, budget_min: f64) {
    let within = l.secs <= budget_min * 60.0;
    let verdict = if l.pass && within { "PASS" } else { "FAIL" };
    let time = if within {
        format!("{:.1} s", l.secs)
    } else {
        format!("{:.1} s, over the {budget_min} min budget", l.secs)
    };
    println!("criterion {:>2} {verdict}: {name}: {} [{time}]", l.id, l.detail);
}
