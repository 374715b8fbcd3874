//! Representation diagnostics: per-class mean representations with their
//! Shannon entropy, and per-neuron class distributions with peakedness.
//!
//! Entropy is taken over the L1-normalized nonnegative mean-activation
//! vector of a class; a well-separated representation concentrates its mean
//! on few neurons and scores low. Peakedness is the largest entry of a
//! neuron's class distribution; a label-consistent neuron scores near 1.

use std::path::Path;

use crate::head::NeuronAllocation;
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub class_id: usize,
    pub samples: usize,
    pub mean: Vec<f64>,
    /// `None` marks an empty class or an all-zero (after clamping) mean.
    pub entropy_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronProfile {
    pub neuron_id: usize,
    pub owner_class: usize,
    /// Sums to 1 unless the neuron is dead, in which case it is all zeros.
    pub distribution: Vec<f64>,
    pub peakedness: f64,
    pub dead: bool,
}

/// Shannon entropy in bits of the L1-normalized weight vector; `None` when
/// the weights sum to zero. Negative weights are invalid here.
pub fn entropy_bits(weights: &[f64]) -> Option<f64> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return None;
    }
    let mut h = 0.0;
    for &w in weights {
        if w > 0.0 {
            let p = w / sum;
            h -= p * p.log2();
        }
    }
    Some(h)
}

/// Mean representation and entropy per class. Columns of `representations`
/// pair with `labels`; `clamp_negative` zeroes negative entries of the mean
/// before normalizing (a no-op after ReLU).
pub fn class_profiles(
    representations: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
    clamp_negative: bool,
) -> Result<Vec<ClassProfile>> {
    if representations.cols() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} representation columns for {} labels",
            representations.cols(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }

    let dim = representations.rows();
    let mut sums = vec![vec![0.0f64; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (j, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (d, v) in representations.column(j).enumerate() {
            sums[y][d] += v;
        }
    }

    let mut out = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let samples = counts[class_id];
        if samples == 0 {
            out.push(ClassProfile {
                class_id,
                samples: 0,
                mean: vec![0.0; dim],
                entropy_bits: None,
            });
            continue;
        }
        let mean: Vec<f64> = sums[class_id].iter().map(|&s| s / samples as f64).collect();
        let clamped: Vec<f64> = if clamp_negative {
            mean.iter().map(|&v| v.max(0.0)).collect()
        } else {
            mean.clone()
        };
        if clamped.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "class {class_id} mean has negative entries; pass clamp_negative"
            )));
        }
        out.push(ClassProfile {
            class_id,
            samples,
            entropy_bits: entropy_bits(&clamped),
            mean,
        });
    }
    Ok(out)
}

/// Class distribution of every neuron: activation mass per class, clamped
/// at zero and normalized. A neuron with no positive activation anywhere is
/// flagged dead instead of divided by zero.
pub fn neuron_profiles(
    representations: &DenseMatrix,
    labels: &[usize],
    allocation: &NeuronAllocation,
) -> Result<Vec<NeuronProfile>> {
    if representations.cols() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} representation columns for {} labels",
            representations.cols(),
            labels.len()
        )));
    }
    if representations.rows() != allocation.num_neurons() {
        return Err(Error::InvalidArgument(format!(
            "{} representation rows for {} allocated neurons",
            representations.rows(),
            allocation.num_neurons()
        )));
    }
    let m = allocation.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: m,
        });
    }

    let mut out = Vec::with_capacity(allocation.num_neurons());
    for neuron_id in 0..allocation.num_neurons() {
        let mut mass = vec![0.0f64; m];
        for (j, &y) in labels.iter().enumerate() {
            mass[y] += representations.get(neuron_id, j).max(0.0);
        }
        let total: f64 = mass.iter().sum();
        let (distribution, peakedness, dead) = if total > 0.0 {
            let dist: Vec<f64> = mass.iter().map(|&v| v / total).collect();
            let peak = dist.iter().cloned().fold(0.0, f64::max);
            (dist, peak, false)
        } else {
            (vec![0.0; m], 0.0, true)
        };
        out.push(NeuronProfile {
            neuron_id,
            owner_class: allocation.owner(neuron_id),
            distribution,
            peakedness,
            dead,
        });
    }
    Ok(out)
}

/// Writes `class_profiles.csv`, `neuron_profiles.csv` and a one-page
/// `summary.txt` under `dir`.
pub fn export_report(
    class_profiles: &[ClassProfile],
    neuron_profiles: &[NeuronProfile],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut cp = String::from("class_id,samples,entropy_bits\n");
    for p in class_profiles {
        let entropy = p.entropy_bits.map_or(String::new(), |h| format!("{h}"));
        cp.push_str(&format!("{},{},{entropy}\n", p.class_id, p.samples));
    }
    std::fs::write(dir.join("class_profiles.csv"), cp)?;

    let m = neuron_profiles.first().map_or(0, |p| p.distribution.len());
    let mut np = String::from("neuron_id,owner_class,dead,peakedness");
    for c in 0..m {
        np.push_str(&format!(",p{c}"));
    }
    np.push('\n');
    for p in neuron_profiles {
        np.push_str(&format!(
            "{},{},{},{}",
            p.neuron_id, p.owner_class, p.dead, p.peakedness
        ));
        for v in &p.distribution {
            np.push_str(&format!(",{v}"));
        }
        np.push('\n');
    }
    std::fs::write(dir.join("neuron_profiles.csv"), np)?;

    let entropies: Vec<f64> = class_profiles
        .iter()
        .filter_map(|p| p.entropy_bits)
        .collect();
    let mean_entropy = if entropies.is_empty() {
        f64::NAN
    } else {
        entropies.iter().sum::<f64>() / entropies.len() as f64
    };
    let live: Vec<&NeuronProfile> = neuron_profiles.iter().filter(|p| !p.dead).collect();
    let mean_peak = if live.is_empty() {
        f64::NAN
    } else {
        live.iter().map(|p| p.peakedness).sum::<f64>() / live.len() as f64
    };
    let owner_agreement = if live.is_empty() {
        f64::NAN
    } else {
        live.iter()
            .filter(|p| {
                let argmax = p
                    .distribution
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite").then(b.0.cmp(&a.0)))
                    .map(|(c, _)| c);
                argmax == Some(p.owner_class)
            })
            .count() as f64
            / live.len() as f64
    };
    let summary = format!(
        "classes: {}\nneurons: {}\ndead neurons: {}\nmean class entropy (bits): {mean_entropy}\nmean neuron peakedness: {mean_peak}\nneurons peaking at their owner class: {owner_agreement}\n",
        class_profiles.len(),
        neuron_profiles.len(),
        neuron_profiles.len() - live.len(),
    );
    std::fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}

/// Optional dump for external plotting: one row per class, the mean
/// representation across all neurons.
pub fn write_class_means(profiles: &[ClassProfile], path: &Path) -> Result<()> {
    let dim = profiles.first().map_or(0, |p| p.mean.len());
    let mut out = String::from("class_id");
    for d in 0..dim {
        out.push_str(&format!(",n{d}"));
    }
    out.push('\n');
    for p in profiles {
        out.push_str(&format!("{}", p.class_id));
        for v in &p.mean {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
