use fm3::config::Protocol;
use fm3::data::{read_ndjson, write_ndjson};
use fm3::report::{aggregate, Metric};
use fm3::runner::EpisodeRecord;
use fm3_core::pipeline::EpisodeMode;
use proptest::prelude::*;

fn record(task: usize, k: usize, episode: usize, accuracy: f64, seed: u64) -> EpisodeRecord {
    EpisodeRecord {
        task: format!("task{task}"),
        task_id: task,
        k,
        episode,
        seed,
        protocol: Protocol::Joint,
        mode: EpisodeMode::Full,
        accuracy,
        f1: accuracy / 2.0,
        n_eval: 40,
        support: 2 * k,
        contrastive_steps: 0,
        skipped: None,
        chance_flag: false,
    }
}

fn records() -> impl Strategy<Value = Vec<EpisodeRecord>> {
    prop::collection::vec((0usize..3, prop::sample::select(vec![0usize, 4, 16]), 0.0f64..1.0, any::<u64>()), 1..40)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (t, k, a, s))| record(t, k, i, a, s)).collect())
}

proptest! {
    #[test]
    fn ndjson_round_trips_exactly(recs in records()) {
        let mut buf = Vec::new();
        write_ndjson(&mut buf, &recs).unwrap();
        let back: Vec<EpisodeRecord> = read_ndjson(buf.as_slice()).unwrap();
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn cells_summarize_their_episodes(recs in records()) {
        let table = aggregate(&recs, Metric::Accuracy);
        for ((row, k), cell) in &table.cells {
            let values: Vec<f64> = recs.iter().filter(|r| &r.task == row && r.k == *k).map(|r| r.accuracy).collect();
            prop_assert_eq!(cell.n, values.len());
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(cell.mean >= lo - 1e-12 && cell.mean <= hi + 1e-12);
            prop_assert!(cell.std >= 0.0 && cell.std <= (hi - lo) + 1e-12);
        }
        prop_assert_eq!(table.cells.values().map(|c| c.n).sum::<usize>(), recs.len());
    }
}
