use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use stg_bench::{examples, random_store};
use stg_core::decode::{decode, Strategy};
use stg_core::metrics::{bleu, rouge, RougeVariant};
use stg_core::nets::{Cursor, Session};
use stg_core::policy::PolicyKind;
use stg_core::rl::{assign_reward, lambda_advantages, rl_objective, rollout, ObjectiveWeights};

fn networks(c: &mut Criterion) {
    let store = random_store(1);
    let ex = &examples(1)[0];
    c.bench_function("cursor_feed_24_tokens", |b| {
        b.iter(|| {
            let mut cur = Cursor::new(&store);
            for &t in ex.context.iter().chain(&ex.target) {
                black_box(cur.feed(t).unwrap());
            }
        })
    });
    c.bench_function("tape_lstm_step", |b| {
        b.iter(|| {
            let mut s = Session::new(&store);
            let st = s.initial_state();
            black_box(s.step(ex.context[0], st).unwrap());
        })
    });
}

fn rl(c: &mut Criterion) {
    let store = random_store(2);
    let ex = &examples(1)[0];
    c.bench_function("stg_rollout", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            black_box(rollout(PolicyKind::Stg, &store, &ex.context, 32, 1.0, &mut rng).unwrap())
        })
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut traj = rollout(PolicyKind::Stg, &store, &ex.context, 32, 1.0, &mut rng).unwrap();
    assign_reward(&mut traj, 0.5);
    let adv = lambda_advantages(&traj.rewards, &traj.values(), 1.0, 1.0);
    c.bench_function("stg_objective_backward", |b| {
        b.iter(|| {
            let mut s = Session::new(&store);
            let loss = rl_objective(
                &mut s,
                &traj,
                &adv,
                ObjectiveWeights {
                    critic: 1.0,
                    entropy: 0.0,
                },
            )
            .unwrap();
            black_box(s.tape.backward(loss).unwrap());
        })
    });
    c.bench_function("greedy_decode", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            black_box(
                decode(
                    &store,
                    PolicyKind::Stg,
                    &ex.context,
                    Strategy::Greedy,
                    32,
                    &mut rng,
                )
                .unwrap(),
            )
        })
    });
}

fn metrics(c: &mut Criterion) {
    let hyp: Vec<String> = "a b c d e f g h i j k l m n o p q r s t"
        .split(' ')
        .map(String::from)
        .collect();
    let reference: Vec<String> = "a b c # e f g h # j k l m n # p q r s t u"
        .split(' ')
        .map(String::from)
        .collect();
    c.bench_function("bleu4", |b| {
        b.iter(|| black_box(bleu(&hyp, std::slice::from_ref(&reference), 4).unwrap()))
    });
    c.bench_function("rouge_l", |b| {
        b.iter(|| black_box(rouge(&hyp, &reference, RougeVariant::L)))
    });
}

criterion_group!(benches, networks, rl, metrics);
criterion_main!(benches);
