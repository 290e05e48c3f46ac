use rand::Rng;

use super::scene::{Dataset, LabelSet};
use super::{rng_for, SynthError};

const WALR_STREAM: u64 = 0x7761_6c72;

/// Labels after wrong-attribute-label corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct WalrOutcome {
    /// One label set per scene; scenes outside the corrupted subset keep their
    /// clean labels.
    pub labels: Vec<LabelSet>,
    /// Recorded attribute of every object, per scene, in placement order.
    pub recorded: Vec<Vec<usize>>,
    pub objects: usize,
    pub corrupted: usize,
}

/// With probability `walr`, independently per object in `scenes`, replaces
/// the recorded attribute with a uniformly drawn different attribute. The
/// draw for a scene depends only on `(seed, scene id)`, so the same scene is
/// corrupted identically whichever subset it is processed in.
pub fn inject_walr_noise(ds: &Dataset, walr: f64, seed: u64, scenes: &[usize]) -> Result<WalrOutcome, SynthError> {
    if !(0.0..=1.0).contains(&walr) {
        return Err(SynthError::Config(format!("walr {walr} outside [0,1]")));
    }
    let n = ds.n_attributes();
    if walr > 0.0 && n < 2 {
        return Err(SynthError::Config("label corruption needs at least two attributes".into()));
    }
    let mut recorded: Vec<Vec<usize>> = ds
        .scenes
        .iter()
        .map(|s| s.objects.iter().map(|o| o.attribute).collect())
        .collect();
    let mut labels = ds.labels.clone();
    let (mut objects, mut corrupted) = (0, 0);
    for &sid in scenes {
        let scene = &ds.scenes[sid];
        objects += scene.objects.len();
        if walr == 0.0 {
            continue;
        }
        let mut rng = rng_for(seed ^ sid as u64, WALR_STREAM);
        for (slot, o) in recorded[sid].iter_mut().zip(&scene.objects) {
            if rng.random::<f64>() < walr {
                let r = rng.random_range(0..n - 1);
                *slot = if r >= o.attribute { r + 1 } else { r };
                corrupted += 1;
            }
        }
        labels[sid] = LabelSet::from_assignments(
            n,
            recorded[sid].iter().zip(&scene.objects).map(|(&a, o)| (a, o.cell)),
        );
    }
    Ok(WalrOutcome {
        labels,
        recorded,
        objects,
        corrupted,
    })
}
