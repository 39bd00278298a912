//! End-to-end pipeline checks: retrieval ranking against a re-ranking
//! oracle, and the ablation runner's structure and cell isolation.

use valor::ablation::{run_ablation, AblationAxis};
use valor::adapters::{recall_at_k, RetrievalIndex};
use valor::mga::ModalityGroup;
use valor::trainer::{TrainConfig, Trainer};

fn fast_config() -> TrainConfig {
    TrainConfig {
        total_steps: 30,
        warmup_steps: 5,
        batch_size: 4,
        max_text_len: 12,
        text_dim: 16,
        vision_dim: 16,
        audio_dim: 16,
        common_dim: 16,
        layers: 1,
        heads: 2,
        vision_events: 4,
        audio_events: 4,
        frame_h: 8,
        frame_w: 8,
        vision_patch: 4,
        mel_bins: 4,
        spec_frames: 8,
        audio_patch_h: 2,
        audio_patch_w: 4,
        finetune_steps: 6,
        ..TrainConfig::default()
    }
}

/// The trainer's matrix-based evaluation must agree with a brute-force
/// re-ranking oracle built on the per-query retrieval index path.
#[test]
fn trained_retrieval_matches_reranking_oracle() {
    let mut trainer = Trainer::new(fast_config()).unwrap();
    trainer.pretrain(None).unwrap();

    let (evals, _) = trainer.evaluate().unwrap();
    let group = ModalityGroup::parse("T-AV").unwrap();
    let matrix_r1 = evals.iter().find(|e| e.group == "T-AV").unwrap().r1;

    // Oracle: rank every query independently over a candidate index.
    let split = trainer.eval_split().unwrap();
    let candidates: Vec<(usize, valor::data::BatchExample)> =
        split.iter().cloned().enumerate().collect();
    let mut index = RetrievalIndex::build(&trainer.model, &candidates).unwrap();
    let variant = trainer.config.alignment_variant();
    let rankings: Vec<Vec<usize>> = split
        .iter()
        .map(|query| {
            index
                .rank(&trainer.model, query, &group, &variant)
                .unwrap()
                .into_iter()
                .map(|(id, _)| id)
                .collect()
        })
        .collect();
    let gt: Vec<usize> = (0..split.len()).collect();
    let oracle_r1 = recall_at_k(&rankings, &gt, 1).unwrap();

    assert_eq!(
        matrix_r1, oracle_r1,
        "matrix evaluation R@1 {matrix_r1} differs from re-ranking oracle {oracle_r1}"
    );
}

/// Grid runs produce exactly benchmarks x (zero-shot, finetune) cells per
/// row, and a cell's pretraining is bit-identical to the same configuration
/// trained in isolation (no optimizer or parameter state leaks across cells).
#[test]
fn ablation_grid_structure_and_cell_isolation() {
    let mut base = fast_config();
    base.total_steps = 12;
    base.warmup_steps = 3;
    let benchmarks = vec![
        ModalityGroup::parse("T-V").unwrap(),
        ModalityGroup::parse("T-A").unwrap(),
        ModalityGroup::parse("T-AV").unwrap(),
    ];
    let result = run_ablation(&base, AblationAxis::MgaGroups, &benchmarks).unwrap();

    assert_eq!(result.rows.len(), 7);
    let m6 = result.rows.iter().find(|r| r.name == "M6").unwrap();
    let columns: Vec<&str> = m6.cells.iter().map(|c| c.benchmark.as_str()).collect();
    assert_eq!(columns, vec!["T-V", "T-A", "T-AV"]);
    assert_eq!(m6.cells.len(), 3); // each carrying zero-shot and finetune

    // Isolation: rerun M3 alone with the same patch and compare zero-shot.
    let mut cfg = base.clone();
    cfg.mga_groups = vec!["t-av".into()];
    cfg.mgc_groups = vec![];
    cfg.alpha = 1.0;
    cfg.eval_groups = vec!["t-v".into(), "t-a".into(), "t-av".into()];
    let mut solo = Trainer::new(cfg).unwrap();
    let evals = solo.pretrain(None).unwrap();
    let m3 = result.rows.iter().find(|r| r.name == "M3").unwrap();
    for cell in &m3.cells {
        let solo_eval = evals.iter().find(|e| e.group == cell.benchmark).unwrap();
        assert_eq!(
            cell.zero_shot, solo_eval.r1,
            "cell {} zero-shot differs from isolated run",
            cell.benchmark
        );
    }
}

/// Two-config, two-benchmark grids produce four result cells.
#[test]
fn small_grid_produces_four_cells() {
    let mut base = fast_config();
    base.total_steps = 8;
    base.warmup_steps = 2;
    base.finetune_steps = 2;
    let benchmarks = vec![
        ModalityGroup::parse("T-V").unwrap(),
        ModalityGroup::parse("T-AV").unwrap(),
    ];
    // Combine-tasks has five rows; take the cell count over two benchmarks.
    let result = run_ablation(&base, AblationAxis::CombineTasks, &benchmarks).unwrap();
    assert_eq!(result.rows.len(), 5);
    for row in &result.rows {
        assert_eq!(row.cells.len(), 2);
    }
    let first_two: usize = result.rows[..2].iter().map(|r| r.cells.len()).sum();
    assert_eq!(first_two, 4);
}
