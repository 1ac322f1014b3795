//! Turns a dataset specification into train and test batches. Every
//! generator is a pure function of the specification and the seed.

use std::path::Path;

use mnp_core::config::DatasetSpec;
use mnp_core::data::{
    load_feature_dataset, load_matrix, load_ood_features, make_moons, view_maps, views_with_maps, MultimodalBatch, VIEW_NOISE_STD,
};
use mnp_core::tensor::Tensor;
use mnp_core::{MnpError, Result};

/// Train and held-out test split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: MultimodalBatch,
    pub test: MultimodalBatch,
}

fn moons_pair(n_train: usize, n_test: usize, noise: f64, seed: u64) -> Result<Splits> {
    Ok(Splits {
        train: make_moons(n_train, noise, seed)?,
        test: make_moons(n_test, noise, seed.wrapping_add(1))?,
    })
}

pub fn build(spec: &DatasetSpec, seed: u64) -> Result<Splits> {
    match spec {
        DatasetSpec::Moons { n_train, n_test, noise } => moons_pair(*n_train, *n_test, *noise, seed),
        DatasetSpec::Views {
            modalities,
            n_train,
            n_test,
            noise,
        } => {
            let base = moons_pair(*n_train, *n_test, *noise, seed)?;
            let maps = view_maps(2, *modalities, seed.wrapping_add(2));
            Ok(Splits {
                train: views_with_maps(&base.train, &maps, VIEW_NOISE_STD, seed.wrapping_add(3))?,
                test: views_with_maps(&base.test, &maps, VIEW_NOISE_STD, seed.wrapping_add(4))?,
            })
        }
        DatasetSpec::FeatureFiles {
            modalities,
            labels,
            train_ratio,
        } => {
            let (train, test) = load_feature_dataset(modalities, labels, *train_ratio, seed)?;
            Ok(Splits { train, test })
        }
    }
}

/// Whether the inputs live in the plane, as required by the grid command.
pub fn is_planar(spec: &DatasetSpec) -> bool {
    matches!(spec, DatasetSpec::Moons { .. })
}

/// Out-of-distribution inputs: the test set translated by `shift` in every
/// coordinate for synthetic data, or standardised OOD feature files.
pub fn ood_features(spec: &DatasetSpec, seed: u64, test: &MultimodalBatch, shift: f64, files: &[String]) -> Result<Vec<Tensor>> {
    match spec {
        DatasetSpec::FeatureFiles {
            modalities,
            labels,
            train_ratio,
        } => {
            if files.is_empty() {
                return Err(MnpError::Protocol("feature-file datasets need --ood-features".into()));
            }
            load_ood_features(modalities, labels, *train_ratio, seed, files)
        }
        _ => {
            if !files.is_empty() {
                if files.len() != test.num_modalities() {
                    return Err(MnpError::Ingestion(format!(
                        "{} OOD files for {} modalities",
                        files.len(),
                        test.num_modalities()
                    )));
                }
                return files
                    .iter()
                    .zip(test.features())
                    .map(|(f, t)| read_plain_matrix(f, t.cols()))
                    .collect();
            }
            Ok(test.features().iter().map(|t| t.map(|x| x + shift)).collect())
        }
    }
}

fn read_plain_matrix(path: &str, cols: usize) -> Result<Tensor> {
    let t = load_matrix(Path::new(path))?;
    if t.cols() != cols {
        return Err(MnpError::Ingestion(format!("{path} has {} columns, expected {cols}", t.cols())));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_share_labels_with_the_base_moons() {
        let spec = DatasetSpec::Views {
            modalities: 3,
            n_train: 40,
            n_test: 10,
            noise: 0.1,
        };
        let s = build(&spec, 7).unwrap();
        let base = build(&DatasetSpec::Moons { n_train: 40, n_test: 10, noise: 0.1 }, 7).unwrap();
        assert_eq!(s.train.num_modalities(), 3);
        assert_eq!(s.train.labels(), base.train.labels());
        assert_eq!(s.test.labels(), base.test.labels());
    }

    #[test]
    fn generation_is_pure() {
        let spec = DatasetSpec::default();
        let a = build(&spec, 3).unwrap();
        let b = build(&spec, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train, a.test);
    }
}
