use lpsr::ocr::{OcrTrainConfig, ToyOcr};
use lpsr::synthplate::sample_corpus;

#[test]
fn training_loss_falls_over_first_three_epochs() {
    let samples = sample_corpus(500, 0.5, 31).unwrap();
    let mut ocr = ToyOcr::new(7);
    let cfg = OcrTrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let log = ocr.train(&samples, &cfg).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|e| e.loss.is_finite()));
    assert!(log[0].loss > log[1].loss && log[1].loss > log[2].loss, "{log:?}");
}
