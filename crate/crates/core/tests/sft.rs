mod common;

use common::{fixture, fixture_with_codes, Fixture};
use minirec_autodiff::Graph;
use minirec_core::catalog::Example;
use minirec_core::policy::{log_softmax_at, Checkpoint, Policy};
use minirec_core::sft::{
    build_alignment_examples, build_corpus, build_generative_retrieval, eval_loss, load_corpus, loss_csv, masked_loss,
    new_optimizer, save_corpus, sft_steps, sft_train, SftConfig, TaskMix, TrainingExample,
};
use minirec_core::vocab::{Task, TokenKind, BOS, EOS, SEP};
use minirec_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_examples(f: &Fixture, n: usize, seed: u64) -> Vec<Example> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let items = f.catalog.len() as u32;
    (0..n)
        .map(|i| {
            let len = r.random_range(1..5);
            Example {
                user_id: i as u32,
                position: len as u32,
                history: (0..len).map(|_| r.random_range(0..items)).collect(),
                target: r.random_range(0..items),
            }
        })
        .collect()
}

/// Reads item ids back out of a retrieval prompt.
fn decode_history(f: &Fixture, prompt: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut i = 2;
    while prompt[i] != SEP {
        let mut codes = Vec::new();
        for l in 0..f.layout.n_levels {
            match f.layout.kind(prompt[i]) {
                Ok(TokenKind::Sid { level, code }) if level == l => codes.push(code),
                other => panic!("expected a level-{l} SID token, got {other:?}"),
            }
            i += 1;
        }
        let disambiguation = match f.layout.kind(prompt[i]) {
            Ok(TokenKind::Suffix(s)) => {
                i += 1;
                s
            }
            _ => 0,
        };
        let hit: Vec<u32> = f
            .sids
            .entries()
            .iter()
            .filter(|e| e.codes == codes && e.disambiguation == disambiguation)
            .map(|e| e.item_id)
            .collect();
        assert_eq!(hit.len(), 1);
        out.push(hit[0]);
    }
    out
}

#[test]
fn retrieval_prompts_have_the_expected_length() {
    let f = fixture(30, 16, 1);
    let pb = f.builder();
    let e = Example { user_id: 0, position: 1, history: vec![3], target: 7 };
    let ex = &build_generative_retrieval(&[e], &pb).unwrap()[0];
    let suffix = |i: u32| f.sids.needs_suffix(i) as usize;
    assert_eq!(ex.prompt().len(), 1 + 1 + 3 + suffix(3) + 1);
    assert_eq!(ex.response().len(), 3 + suffix(7) + 1);
    assert_eq!(ex.prompt()[0], BOS);
    assert_eq!(ex.prompt()[1], f.layout.task_token(Task::GenerativeRetrieval));
    assert_eq!(*ex.response().last().unwrap(), EOS);
}

#[test]
fn colliding_items_carry_a_suffix_token() {
    let f = fixture_with_codes(&[[0, 0, 0], [0, 0, 0], [1, 2, 3]], 4, 2);
    let pb = f.builder();
    let e = Example { user_id: 0, position: 1, history: vec![1], target: 2 };
    let ex = &build_generative_retrieval(&[e], &pb).unwrap()[0];
    assert_eq!(ex.prompt().len(), 1 + 1 + 4 + 1);
    assert_eq!(ex.response().len(), 3 + 1);
    assert_eq!(decode_history(&f, ex.prompt()), vec![1]);
}

#[test]
fn prompts_decode_back_to_the_history() {
    let f = fixture(60, 8, 3);
    let pb = f.builder();
    let examples = random_examples(&f, 200, 4);
    for (e, ex) in examples.iter().zip(build_generative_retrieval(&examples, &pb).unwrap()) {
        assert_eq!(decode_history(&f, ex.prompt()), e.history);
        let n_response = ex.response().len();
        assert_eq!(ex.n_scored(), n_response);
        assert!(ex.mask[..ex.prompt_len()].iter().all(|&m| !m));
    }
}

#[test]
fn missing_sids_name_the_item() {
    let f = fixture(10, 4, 5);
    let e = Example { user_id: 0, position: 1, history: vec![999], target: 0 };
    match build_generative_retrieval(&[e], &f.builder()) {
        Err(Error::MissingSid { item_id }) => assert_eq!(item_id, 999),
        other => panic!("expected missing SID, got {other:?}"),
    }
}

#[test]
fn title_and_sid_tasks_invert_each_other() {
    let f = fixture(40, 8, 6);
    let pb = f.builder();
    for item in 0..40 {
        let s2t = pb.example(Task::SidToTitle, &[], item).unwrap();
        let t2s = pb.example(Task::TitleToSid, &[], item).unwrap();
        assert_eq!(&s2t.prompt()[2..s2t.prompt_len() - 1], &t2s.response()[..t2s.response().len() - 1]);
        assert_eq!(&t2s.prompt()[2..t2s.prompt_len() - 1], &s2t.response()[..s2t.response().len() - 1]);
    }
}

#[test]
fn family_counts_follow_the_mix() {
    let f = fixture(100, 8, 7);
    let pb = f.builder();
    let examples = random_examples(&f, 6000, 8);
    let corpus = build_corpus(&examples, &pb, &TaskMix::default(), 9).unwrap();
    assert!((corpus.len() as i64 - 10_000).abs() <= 5);
    for t in Task::ALL {
        let share = corpus.iter().filter(|e| e.task == t).count() as f64 / corpus.len() as f64;
        let want = TaskMix::default().weight(t);
        assert!((share - want).abs() <= 0.02, "{}: {share} vs {want}", t.name());
    }
    let no_titles = TaskMix::new(&[(Task::GenerativeRetrieval, 0.7), (Task::TitleToSid, 0.3)]).unwrap();
    let corpus = build_corpus(&examples[..100], &pb, &no_titles, 9).unwrap();
    assert_eq!(corpus.iter().filter(|e| e.task == Task::SidToTitle).count(), 0);
    assert_eq!(corpus.iter().filter(|e| e.task == Task::TitleToSid).count(), 43);
    assert!(TaskMix::new(&[(Task::GenerativeRetrieval, 0.5)]).is_err());
    assert!(TaskMix::new(&[(Task::GenerativeRetrieval, 1.5), (Task::SidToTitle, -0.5)]).is_err());
}

#[test]
fn corpus_building_is_a_pure_function_of_its_inputs() {
    let f = fixture(50, 8, 10);
    let pb = f.builder();
    let examples = random_examples(&f, 300, 11);
    let a = build_alignment_examples(&examples, &pb, &TaskMix::default(), 500, 12).unwrap();
    assert_eq!(a, build_alignment_examples(&examples, &pb, &TaskMix::default(), 500, 12).unwrap());
    assert_ne!(a, build_alignment_examples(&examples, &pb, &TaskMix::default(), 500, 13).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    save_corpus(&path, &a).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), a);
    std::fs::write(&path, r#"{"tokens":[1,2],"mask":[true,true],"task":"sid_to_title"}"#).unwrap();
    assert!(load_corpus(&path).is_err());
}

/// Mean negative log-likelihood of masked-in tokens from the full forward.
fn oracle_loss(policy: &Policy, batch: &[TrainingExample]) -> f64 {
    let (mut total, mut n) = (0.0, 0);
    for e in batch {
        let logits = policy.forward_logits(&e.tokens).unwrap();
        let v = policy.vocab_size();
        for t in 1..e.tokens.len() {
            if e.mask[t] {
                total -= log_softmax_at(&logits.data()[(t - 1) * v..t * v], e.tokens[t] as usize);
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn only_masked_in_positions_are_scored() {
    let f = fixture(30, 8, 14);
    let pb = f.builder();
    let examples = build_generative_retrieval(&random_examples(&f, 6, 15), &pb).unwrap();
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let mut g = Graph::new();
    let loss = masked_loss(&f.policy, &mut g, f.policy.store(), &refs).unwrap();
    assert!((g.value(loss).item() - oracle_loss(&f.policy, &examples)).abs() < 1e-10);

    // dropping a response position from the mask removes exactly its term
    let mut trimmed = examples.clone();
    let last = trimmed[0].tokens.len() - 1;
    trimmed[0].mask[last] = false;
    let refs: Vec<&TrainingExample> = trimmed.iter().collect();
    let mut g = Graph::new();
    let loss = masked_loss(&f.policy, &mut g, f.policy.store(), &refs).unwrap();
    assert!((g.value(loss).item() - oracle_loss(&f.policy, &trimmed)).abs() < 1e-10);

    // the gradient of the logits at a masked-out row is exactly zero
    let one = &examples[0];
    let packed = f.policy.pack(&[one.tokens.as_slice()]).unwrap();
    let mut g = Graph::new();
    let h = f.policy.hidden(&mut g, f.policy.store(), &packed).unwrap();
    let rows: Vec<usize> = (0..one.tokens.len() - 1).collect();
    let logits = f.policy.logits_at(&mut g, f.policy.store(), h, &rows).unwrap();
    let targets: Vec<usize> = one.tokens[1..].iter().map(|&t| t as usize).collect();
    let n = one.n_scored() as f64;
    let w: Vec<f64> = one.mask[1..].iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect();
    let loss = g.cross_entropy(logits, &targets, &w).unwrap();
    let grads = g.backward(loss).unwrap();
    let dl = grads.wrt(logits).unwrap();
    let v = f.policy.vocab_size();
    for (r, &m) in one.mask[1..].iter().enumerate() {
        let row = &dl.data()[r * v..(r + 1) * v];
        assert_eq!(row.iter().all(|&x| x == 0.0), !m, "row {r}");
    }
}

#[test]
fn an_untrained_policy_is_near_uniform() {
    let f = fixture(50, 8, 16);
    let examples = build_generative_retrieval(&random_examples(&f, 40, 17), &f.builder()).unwrap();
    let loss = eval_loss(&f.policy, &examples, 16).unwrap();
    let ln_v = (f.policy.vocab_size() as f64).ln();
    assert!((loss - ln_v).abs() <= 0.05 * ln_v, "loss {loss} vs ln V {ln_v}");
    assert!((loss - eval_loss(&f.policy, &examples, 7).unwrap()).abs() < 1e-12);
    assert!(eval_loss(&f.policy, &[], 4).is_err());
}

#[test]
fn eight_examples_are_memorized() {
    let mut f = fixture(30, 8, 18);
    let examples = build_generative_retrieval(&random_examples(&f, 8, 19), &f.builder()).unwrap();
    let losses = sft_steps(&mut f.policy, &examples, 300, 8, 3e-3, 0).unwrap();
    let last = *losses.last().unwrap();
    assert!(last < 0.05, "final loss {last}");
    assert!(eval_loss(&f.policy, &examples, 8).unwrap() < 0.05);
}

fn train_valid(f: &Fixture) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    let pb = f.builder();
    let train = build_generative_retrieval(&random_examples(f, 96, 20), &pb).unwrap();
    let valid = build_generative_retrieval(&random_examples(f, 24, 21), &pb).unwrap();
    (train, valid)
}

#[test]
fn the_best_validation_checkpoint_is_returned() {
    let f = fixture(30, 8, 22);
    let (train, valid) = train_valid(&f);
    let cfg = SftConfig { epochs: 6, batch_size: 16, lr: 3e-3, patience: 1, seed: 1 };
    let out = sft_train(Checkpoint::new(f.policy.clone()), &train, &valid, &cfg).unwrap();
    let min = out.history.iter().map(|h| h.valid_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_valid_loss, min);
    assert!(out.best_valid_loss <= out.history.last().unwrap().valid_loss);
    assert!((eval_loss(&out.best, &valid, 64).unwrap() - out.best_valid_loss).abs() < 1e-12);
    assert_eq!(out.history[out.best_epoch - 1].valid_loss, min);
    if out.stopped_early {
        let n = out.history.len();
        assert!(out.history[n - 1].valid_loss >= out.history[n - 2].valid_loss.min(min));
    }
    let csv = loss_csv(&out.history);
    assert!(csv.starts_with("epoch,train_loss,valid_loss\n"));
    assert_eq!(csv.lines().count(), out.history.len() + 1);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let f = fixture(30, 8, 23);
    let (train, valid) = train_valid(&f);
    let cfg = SftConfig { epochs: 2, batch_size: 16, lr: 1e-3, patience: 5, seed: 2 };
    let full = sft_train(Checkpoint::new(f.policy.clone()), &train, &valid, &cfg).unwrap();
    // an interrupted run: the optimizer schedule spans both epochs, but only
    // the first one is completed before the checkpoint is written
    let start = Checkpoint {
        optimizer: Some(new_optimizer(&f.policy, &cfg, train.len())),
        ..Checkpoint::new(f.policy.clone())
    };
    let first = sft_train(start, &train, &valid, &SftConfig { epochs: 1, ..cfg.clone() }).unwrap();
    assert_eq!(first.last.epochs_done, 1);
    let saved = Checkpoint::from_bytes(&first.last.to_bytes()).unwrap();
    let resumed = sft_train(saved, &train, &valid, &cfg).unwrap();
    assert_eq!(resumed.last.to_bytes(), full.last.to_bytes());
}

#[test]
fn a_diverging_run_keeps_the_last_finite_parameters() {
    let f = fixture(20, 4, 24);
    let (train, valid) = train_valid(&f);
    let cfg = SftConfig { epochs: 3, batch_size: 16, lr: 1e200, patience: 5, seed: 3 };
    let out = sft_train(Checkpoint::new(f.policy.clone()), &train, &valid, &cfg).unwrap();
    assert!(out.aborted.is_some(), "{:?}", out.history);
    assert!(out.best_valid_loss.is_finite());
    assert!(eval_loss(&out.best, &valid, 64).unwrap().is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn examples_always_validate(prompt_len in 1usize..10, response_len in 1usize..6) {
        let ex = TrainingExample::new(vec![BOS; prompt_len], vec![EOS; response_len], Task::SidToTitle).unwrap();
        prop_assert!(ex.validate().is_ok());
        prop_assert_eq!(ex.n_scored(), response_len);
        prop_assert_eq!(ex.prompt_len(), prompt_len);
    }
}
