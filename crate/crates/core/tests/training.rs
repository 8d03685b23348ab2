use std::path::PathBuf;

use gaze_forge::dataset::{generate_samples, split, Dataset, SplitSpec, SynthConfig};
use gaze_forge::models::{Family, GazeModel, ModelConfig};
use gaze_forge::train::{evaluate, fit, mean_label_baseline, TrainConfig};

#[test]
fn itracker_on_2000_samples_beats_the_mean_label_baseline() {
    let cfg = SynthConfig {
        num_subjects: 10,
        ..SynthConfig::default()
    };
    let ds = Dataset {
        root: PathBuf::new(),
        samples: generate_samples(&cfg).unwrap(),
    };
    assert_eq!(ds.len(), 2000);
    let parts = split(&ds, &SplitSpec::default()).unwrap();
    let model = GazeModel::<f32>::build(&ModelConfig::new(Family::ItrackerMhsa, 64, 0.125, 1)).unwrap();
    let mut tc = TrainConfig::desk_preset(Family::ItrackerMhsa);
    tc.epochs = 15;
    let outcome = fit(&model, &parts.train, &parts.val, &tc).unwrap();
    let last = outcome.report.epochs.last().unwrap().val_error_deg;
    let baseline = mean_label_baseline(&parts.train, &parts.val).unwrap();
    assert!(last < baseline, "final {last} vs baseline {baseline}");
    let best = outcome.report.best().unwrap().val_error_deg;
    let restored = evaluate(&model, &parts.val, 64).unwrap().mean_deg;
    assert!((restored - best).abs() < 1e-9, "model holds {restored}, report says {best}");
}
