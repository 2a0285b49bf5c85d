use sere_core::checkpoint::Checkpoint;
use sere_core::manifest::Manifest;
use sere_core::toy::{ToyConfig, ToyCorpus};
use sere_core::trainer::{self, TrainConfig};

#[test]
fn written_corpus_trains_like_the_in_memory_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ToyCorpus::generate(&ToyConfig::default());
    let manifest = corpus.write(dir.path()).unwrap();
    let cfg = TrainConfig { epochs: 4, ..TrainConfig::default() };

    let from_disk = Manifest::load(&manifest).unwrap().load_dataset(cfg.epsilon).unwrap();
    let in_memory = corpus.dataset(cfg.epsilon).unwrap();
    let a = trainer::train(&cfg, &from_disk).unwrap();
    let b = trainer::train(&cfg, &in_memory).unwrap();
    assert_eq!(a.model.parameters(), b.model.parameters());
    assert_eq!(a.final_loss.total, b.final_loss.total);
}

#[test]
fn reloaded_checkpoint_scores_the_same() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ToyCorpus::generate(&ToyConfig { seed: 3, ..ToyConfig::default() });
    let data = corpus.dataset(sere_core::idfe::DEFAULT_EPSILON).unwrap();
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let outcome = trainer::train(&cfg, &data).unwrap();
    let ck = Checkpoint {
        model: outcome.model.clone(),
        classes: data.classes.clone(),
        references: outcome.references.clone(),
        epsilon: cfg.epsilon,
    };
    let before = trainer::evaluate(&ck.model, &data.eval_target, &ck.references(), 0).unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let after = trainer::evaluate(&back.model, &data.eval_target, &back.references(), 0).unwrap();
    assert_eq!(before.confusion, after.confusion);
    assert!(before.uar > 0.5, "toy UAR {}", before.uar);
}

#[test]
fn cross_validation_covers_every_eval_sample_once() {
    let corpus = ToyCorpus::generate(&ToyConfig::default());
    let data = corpus.dataset(sere_core::idfe::DEFAULT_EPSILON).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let reports = trainer::cross_validate(&cfg, &data, 5).unwrap();
    assert_eq!(reports.len(), 5);
    let scored: usize = reports.iter().map(|r| r.confusion.sum()).sum();
    assert_eq!(scored, data.eval_target.len());
}
