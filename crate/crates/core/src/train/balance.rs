use std::collections::HashSet;

use rand::Rng;

use crate::data::{DataError, DatasetManifest, SampleRecord};
use crate::label::Label;

/// Oversamples the minority class until both classes are equally common.
///
/// Minority records are copied round-robin in manifest order; each copy gets
/// a fresh augmentation seed so no two entries for one image coincide. The
/// original records are kept unchanged and in order, copies follow them.
pub fn balance_50_50<R: Rng>(manifest: &DatasetManifest, rng: &mut R) -> Result<DatasetManifest, DataError> {
    let counts = manifest.counts();
    for label in Label::ALL {
        if counts.get(label) == 0 {
            return Err(DataError::EmptyClass(label));
        }
    }
    let minority = if counts.benign < counts.malignant {
        Label::Benign
    } else {
        Label::Malignant
    };
    let deficit = counts.get(minority.other()) - counts.get(minority);
    let pool: Vec<&SampleRecord> = manifest.records().iter().filter(|r| r.label == minority).collect();
    let mut used: HashSet<u64> = manifest.records().iter().filter_map(|r| r.augment_seed).collect();
    let mut records = manifest.records().to_vec();
    for i in 0..deficit {
        let seed = loop {
            let s = rng.random::<u64>();
            if used.insert(s) {
                break s;
            }
        };
        let mut copy = pool[i % pool.len()].clone();
        copy.augment_seed = Some(seed);
        records.push(copy);
    }
    DatasetManifest::new(records, manifest.provenance().to_vec())
}
