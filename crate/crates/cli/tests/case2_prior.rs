use ensmooth_cli::cases::{channel_training_image, ds_realizations};
use ensmooth_cli::config::{preset_config, CaseConfig};
use ensmooth_cli::{Preset, SeedBundle};
use ensmooth_core::RngStream;

#[test]
fn prior_mean_and_std_fields_match_training_statistics() {
    let cfg = preset_config(Preset::ChannelCase2Desk).unwrap();
    let CaseConfig::Channel(c) = &cfg.case else {
        panic!("case-2 preset is not a channel case");
    };
    let ti = channel_training_image(c).unwrap();
    let n = 60;
    let fields = ds_realizations(c, &ti, &RngStream::new(SeedBundle::from_index(1).prior, 0), n).unwrap();
    let nodes = fields[0].values().len();
    let (mut mean_sum, mut std_sum) = (0.0, 0.0);
    for k in 0..nodes {
        let m = fields.iter().map(|f| f.values()[k]).sum::<f64>() / n as f64;
        let v = fields.iter().map(|f| (f.values()[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        mean_sum += m;
        std_sum += v.sqrt();
    }
    let (mean, std) = (mean_sum / nodes as f64, std_sum / nodes as f64);
    println!("prior mean field average {mean:.4}, prior std field average {std:.4}");
    assert!((mean - 0.98).abs() <= 0.05, "mean {mean}");
    assert!((std - 0.80).abs() <= 0.05, "std {std}");
}
