use autorank::{Mode, Optimizer, UnionScope};
use autorank_cli::config::RunConfig;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = RunConfig> {
    let task = (
        1usize..128,
        1usize..128,
        prop::collection::vec(1e-3f64..10.0, 0..6),
        0.0f64..1.0,
        1e-3f64..5.0,
        any::<u64>(),
    );
    let train = (
        1usize..500,
        1usize..50,
        1usize..64,
        1usize..64,
        1e-5f64..10.0,
        prop::option::of((0.0f64..0.999, 0.0f64..0.999, 1e-12f64..1e-3)),
        0.0f64..0.1,
        any::<bool>(),
        any::<bool>(),
        any::<u64>(),
        0usize..4096,
        0usize..4096,
    );
    (task, train, "[a-z][a-z0-9_/]{0,20}", any::<bool>()).prop_filter_map(
        "rank fits the task",
        |((d, k, profile, noise, input_std, tseed), tr, dir, plots)| {
            let (epochs, interval, bpe, bs, lr, adam, wd, global, fixed, seed, n_train, n_eval) = tr;
            let mut c = RunConfig::default();
            c.task.d = d;
            c.task.k = k;
            c.task.spectrum_profile = profile;
            c.task.label_noise_std = noise;
            c.task.input_std = input_std;
            c.task.seed = tseed;
            c.train.total_epochs = epochs;
            c.train.restart_interval = interval;
            c.train.batches_per_epoch = bpe;
            c.train.batch_size = bs;
            c.train.learning_rate = lr;
            c.train.optimizer = match adam {
                Some((beta1, beta2, eps)) => Optimizer::Adam { beta1, beta2, eps },
                None => Optimizer::Sgd,
            };
            c.train.weight_decay = wd;
            c.train.max_rank = 1 + (seed as usize) % d.min(k);
            c.train.union_scope = if global { UnionScope::Global } else { UnionScope::Pair };
            c.train.mode = if fixed { Mode::FixedRank } else { Mode::AcLora };
            c.train.seed = seed;
            c.train.train_samples = n_train;
            c.train.eval_samples = n_eval;
            c.output_dir = dir.into();
            c.emit_plots = plots;
            (c.task.spectrum_profile.len() <= d.min(k)).then_some(c)
        },
    )
}

proptest! {
    #[test]
    fn text_form_round_trips(c in config()) {
        let parsed = RunConfig::from_text(&c.to_text(), "generated").unwrap();
        prop_assert_eq!(parsed, c);
    }

    #[test]
    fn json_form_round_trips(c in config()) {
        let json = serde_json::to_string(&c).unwrap();
        let parsed: RunConfig = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(parsed, c);
    }

    #[test]
    fn text_parser_never_panics(text in "[ -~\n]{0,200}") {
        let _ = RunConfig::from_text(&text, "fuzz");
    }
}
