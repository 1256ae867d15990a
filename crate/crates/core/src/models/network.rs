use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_regions, ModelError, ModelKind, Prediction, Predictor, Query};
use crate::geo::{haversine, GeoPoint};
use crate::ingest::{META_ATTRIBUTES, META_VOCAB};
use crate::nn::{Activation, Dense, Embedding, Graph, LstmStack, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_trip: usize,
    pub embed_meta: usize,
    pub lstm_hidden: usize,
    pub n_lstm: usize,
    pub n_dense_meta: usize,
    pub n_dense: usize,
    pub dense_hidden: usize,
    /// Set from the partition; 0 means "not yet known".
    pub n_regions: usize,
    /// First and last `j` regions feed the MLP.
    pub j: usize,
    /// Candidate destinations for the baseline.
    pub baseline_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_trip: 16,
            embed_meta: 8,
            lstm_hidden: 48,
            n_lstm: 1,
            n_dense_meta: 1,
            n_dense: 1,
            dense_hidden: 64,
            n_regions: 0,
            j: 5,
            baseline_k: 100,
        }
    }
}

impl ModelConfig {
    pub fn with_regions(mut self, n_regions: usize) -> Self {
        self.n_regions = n_regions;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("embed_trip", self.embed_trip),
            ("embed_meta", self.embed_meta),
            ("lstm_hidden", self.lstm_hidden),
            ("n_lstm", self.n_lstm),
            ("n_dense_meta", self.n_dense_meta),
            ("n_dense", self.n_dense),
            ("dense_hidden", self.dense_hidden),
            ("n_regions", self.n_regions),
            ("j", self.j),
            ("baseline_k", self.baseline_k),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ModelError::InvalidConfig(format!(
                "{name} must be positive"
            ))),
            None => Ok(()),
        }
    }
}

/// Input positions for the MLP: the first `j` and last `j` ids. A sequence
/// shorter than `j` is padded with its first id in front and its last id
/// at the back, so the result always has `2j` entries.
pub fn mlp_input_ids(ids: &[usize], j: usize) -> Vec<usize> {
    let n = ids.len();
    let k = n.min(j);
    let mut out = Vec::with_capacity(2 * j);
    out.extend(std::iter::repeat_n(ids[0], j - k));
    out.extend_from_slice(&ids[..k]);
    out.extend_from_slice(&ids[n - k..]);
    out.extend(std::iter::repeat_n(ids[n - 1], j - k));
    out
}

#[derive(Debug, Clone)]
struct Layers {
    regions: Embedding,
    lstm: Option<LstmStack>,
    meta: Vec<Embedding>,
    meta_dense: Vec<Dense>,
    dense: Vec<Dense>,
    output: Dense,
}

/// The neural predictors. Layer layout depends on `kind`:
///
/// * `MultiLstm`: region embeddings into an LSTM stack, metadata embeddings
///   into a dense stack, both concatenated (LSTM part first) into the dense
///   head;
/// * `SingleLstm`: the same without the metadata branch;
/// * `Mlp`: embeddings of the first and last `j` regions concatenated into
///   the dense head.
#[derive(Debug, Clone)]
pub struct NeuralModel {
    kind: ModelKind,
    config: ModelConfig,
    params: ParamStore,
    layers: Layers,
}

/// Graph nodes of one example's loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub e1: Var,
    pub e2: Var,
    pub scores: Var,
}

impl NeuralModel {
    pub fn new(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if !kind.is_neural() {
            return Err(ModelError::InvalidConfig(
                "baseline is not a neural model".into(),
            ));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let regions = Embedding::new(
            &mut p,
            "region_embedding",
            c.embed_trip,
            c.n_regions,
            &mut rng,
        );
        let (lstm, mut width) = match kind {
            ModelKind::Mlp => (None, 2 * c.j * c.embed_trip),
            _ => (
                Some(LstmStack::new(
                    &mut p,
                    "lstm",
                    c.embed_trip,
                    c.lstm_hidden,
                    c.n_lstm,
                    &mut rng,
                )),
                c.lstm_hidden,
            ),
        };
        let mut meta = Vec::new();
        let mut meta_dense = Vec::new();
        if kind == ModelKind::MultiLstm {
            for (name, vocab) in META_ATTRIBUTES.iter().zip(META_VOCAB) {
                meta.push(Embedding::new(
                    &mut p,
                    &format!("meta_embedding.{name}"),
                    c.embed_meta,
                    vocab,
                    &mut rng,
                ));
            }
            let mut w = META_ATTRIBUTES.len() * c.embed_meta;
            for l in 0..c.n_dense_meta {
                meta_dense.push(Dense::new(
                    &mut p,
                    &format!("meta_dense.{l}"),
                    w,
                    c.dense_hidden,
                    Activation::Relu,
                    &mut rng,
                ));
                w = c.dense_hidden;
            }
            width += w;
        }
        let mut dense = Vec::new();
        for l in 0..c.n_dense {
            dense.push(Dense::new(
                &mut p,
                &format!("dense.{l}"),
                width,
                c.dense_hidden,
                Activation::Relu,
                &mut rng,
            ));
            width = c.dense_hidden;
        }
        let output = Dense::new(
            &mut p,
            "output",
            width,
            c.n_regions,
            Activation::Identity,
            &mut rng,
        );
        Ok(Self {
            kind,
            config,
            params: p,
            layers: Layers {
                regions,
                lstm,
                meta,
                meta_dense,
                dense,
                output,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Softmax scores over regions.
    pub fn scores<'a>(&self, g: &mut Graph<'a>, q: &Query<'_>) -> Result<Var, ModelError> {
        check_regions(q.regions, self.config.n_regions)?;
        let ids: Vec<usize> = q.regions.iter().map(|r| r.index()).collect();
        let l = &self.layers;
        let mut x = match &l.lstm {
            Some(lstm) => {
                let xs = l.regions.lookup_seq(g, &ids, None)?;
                lstm.forward(g, &xs, None)?
            }
            None => {
                let xs = l
                    .regions
                    .lookup_seq(g, &mlp_input_ids(&ids, self.config.j), None)?;
                g.concat(&xs)
            }
        };
        if self.kind == ModelKind::MultiLstm {
            let parts = l
                .meta
                .iter()
                .zip(q.meta.indices())
                .map(|(e, i)| e.lookup(g, i))
                .collect::<Result<Vec<_>, _>>()?;
            let mut m = g.concat(&parts);
            for d in &l.meta_dense {
                m = d.forward(g, m)?;
            }
            x = g.concat(&[x, m]);
        }
        for d in &l.dense {
            x = d.forward(g, x)?;
        }
        let logits = l.output.forward(g, x)?;
        Ok(g.softmax(logits))
    }

    /// `alpha * E1 + (1 - alpha) * E2` for one query and its destination.
    pub fn loss<'a>(
        &self,
        g: &mut Graph<'a>,
        q: &Query<'_>,
        centroids: &[GeoPoint],
        dest: GeoPoint,
        alpha: f64,
    ) -> Result<LossVars, ModelError> {
        let scores = self.scores(g, q)?;
        // the weighted offset from the destination equals y_gps_hat - dest
        // because the scores sum to one
        let offsets = centroids
            .iter()
            .map(|c| GeoPoint::new(c.lat - dest.lat, c.lon - dest.lon))
            .collect();
        let delta = g.weighted_point(scores, offsets)?;
        let e1 = g.haversine_offset(delta, dest)?;
        let dists = centroids.iter().map(|&c| haversine(c, dest)).collect();
        let e2 = g.dot_const(scores, dists)?;
        let a = g.scale(e1, alpha);
        let b = g.scale(e2, 1.0 - alpha);
        let total = g.add(a, b)?;
        Ok(LossVars {
            total,
            e1,
            e2,
            scores,
        })
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind,
            config: self.config.clone(),
            meta_order: META_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            params: self
                .params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        if file.meta_order != META_ATTRIBUTES {
            return Err(ModelError::Checkpoint(format!(
                "metadata order {:?} differs from {:?}",
                file.meta_order, META_ATTRIBUTES
            )));
        }
        let mut model = Self::new(file.kind, file.config, 0)?;
        let named = file
            .params
            .into_iter()
            .map(|t| Ok((t.name, Tensor::new(t.shape, t.values)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        model.params.load_named(&named)?;
        Ok(model)
    }
}

const FORMAT: &str = "trajdest-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    kind: ModelKind,
    config: ModelConfig,
    meta_order: Vec<String>,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Predictor for NeuralModel {
    fn kind(&self) -> ModelKind {
        self.kind
    }

    fn n_regions(&self) -> usize {
        self.config.n_regions
    }

    fn predict(&self, query: &Query<'_>, centroids: &[GeoPoint]) -> Result<Prediction, ModelError> {
        if centroids.len() != self.config.n_regions {
            return Err(ModelError::RegionCountMismatch {
                expected: self.config.n_regions,
                found: centroids.len(),
            });
        }
        let mut g = Graph::new(&self.params);
        let s = self.scores(&mut g, query)?;
        Prediction::from_scores(g.value(s).to_vec(), centroids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{PrecipitationBin, TemperatureBin, TripMetadata};
    use crate::nn::gradient_check;
    use crate::partition::RegionId;

    fn small_config(n_regions: usize) -> ModelConfig {
        ModelConfig {
            embed_trip: 3,
            embed_meta: 2,
            lstm_hidden: 4,
            dense_hidden: 5,
            ..ModelConfig::default()
        }
        .with_regions(n_regions)
    }

    fn centroids(n: usize) -> Vec<GeoPoint> {
        (0..n)
            .map(|i| GeoPoint::new(41.1 + 0.01 * (i % 3) as f64, -8.6 + 0.013 * i as f64))
            .collect()
    }

    fn meta() -> TripMetadata {
        TripMetadata {
            time_of_day: 33,
            day_of_week: 4,
            temperature: TemperatureBin(Some(5)),
            precipitation: PrecipitationBin::Light,
        }
    }

    #[test]
    fn mlp_slicing_and_padding() {
        let ids: Vec<usize> = (1..=12).collect();
        assert_eq!(
            mlp_input_ids(&ids, 5),
            vec![1, 2, 3, 4, 5, 8, 9, 10, 11, 12]
        );
        assert_eq!(
            mlp_input_ids(&[7, 8, 9], 5),
            vec![7, 7, 7, 8, 9, 7, 8, 9, 9, 9]
        );
        assert_eq!(mlp_input_ids(&[4], 2), vec![4, 4, 4, 4]);
    }

    #[test]
    fn rejects_bad_regions() {
        let m = NeuralModel::new(ModelKind::SingleLstm, small_config(4), 0).unwrap();
        let c = centroids(4);
        let meta = meta();
        let bad = [RegionId(5)];
        let q = Query {
            points: &[],
            regions: &bad,
            meta: &meta,
        };
        assert!(matches!(
            m.predict(&q, &c),
            Err(ModelError::RegionOutOfRange { id: 5, .. })
        ));
        let q = Query {
            points: &[],
            regions: &[],
            meta: &meta,
        };
        assert!(matches!(m.predict(&q, &c), Err(ModelError::EmptySequence)));
    }

    #[test]
    fn untrained_scores_are_near_uniform() {
        let n = 64;
        let c = centroids(n);
        let meta = meta();
        let regions: Vec<RegionId> = [3, 9, 9, 27, 40].iter().map(|&i| RegionId(i)).collect();
        for kind in [ModelKind::MultiLstm, ModelKind::SingleLstm, ModelKind::Mlp] {
            let m = NeuralModel::new(kind, ModelConfig::default().with_regions(n), 5).unwrap();
            let p = m
                .predict(
                    &Query {
                        points: &[],
                        regions: &regions,
                        meta: &meta,
                    },
                    &c,
                )
                .unwrap();
            let max = p.scores.iter().copied().fold(0.0, f64::max);
            assert!(max < 10.0 / n as f64, "{kind}: {max}");
            assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_input_ignores_metadata() {
        let n = 6;
        let c = centroids(n);
        let regions = [RegionId(1), RegionId(4)];
        let m = NeuralModel::new(ModelKind::SingleLstm, small_config(n), 1).unwrap();
        let a = m
            .predict(
                &Query {
                    points: &[],
                    regions: &regions,
                    meta: &meta(),
                },
                &c,
            )
            .unwrap();
        let other = TripMetadata::default();
        let b = m
            .predict(
                &Query {
                    points: &[],
                    regions: &regions,
                    meta: &other,
                },
                &c,
            )
            .unwrap();
        assert_eq!(a, b);
        let multi = NeuralModel::new(ModelKind::MultiLstm, small_config(n), 1).unwrap();
        let a = multi
            .predict(
                &Query {
                    points: &[],
                    regions: &regions,
                    meta: &meta(),
                },
                &c,
            )
            .unwrap();
        let b = multi
            .predict(
                &Query {
                    points: &[],
                    regions: &regions,
                    meta: &other,
                },
                &c,
            )
            .unwrap();
        assert_ne!(a.scores, b.scores);
    }

    #[test]
    fn metadata_embeddings_follow_declared_order() {
        let m = NeuralModel::new(ModelKind::MultiLstm, small_config(4), 0).unwrap();
        let names: Vec<&str> = m
            .params()
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("meta_embedding."))
            .collect();
        assert_eq!(
            names,
            [
                "meta_embedding.time_of_day.table",
                "meta_embedding.day_of_week.table",
                "meta_embedding.temperature.table",
                "meta_embedding.precipitation.table"
            ]
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 4;
        let c = centroids(n);
        let meta = meta();
        let regions = [RegionId(2), RegionId(2), RegionId(3), RegionId(1)];
        let dest = GeoPoint::new(41.125, -8.58);
        for kind in [ModelKind::MultiLstm, ModelKind::SingleLstm, ModelKind::Mlp] {
            let m = NeuralModel::new(kind, small_config(n), 11).unwrap();
            let q = Query {
                points: &[],
                regions: &regions,
                meta: &meta,
            };
            let mut grads = m.params().zero_grads();
            let mut g = Graph::new(m.params());
            let l = m.loss(&mut g, &q, &c, dest, 0.5).unwrap();
            g.backward(l.total, &mut grads).unwrap();
            let report = gradient_check(m.params(), &grads, |p| {
                // layers only hold parameter ids, so any store with the same layout works
                let mut g = Graph::new(p);
                let l = m.loss(&mut g, &q, &c, dest, 0.5).unwrap();
                g.scalar(l.total)
            });
            assert!(report.passes(1e-4), "{kind}: {report:?}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let n = 5;
        let m = NeuralModel::new(ModelKind::MultiLstm, small_config(n), 3).unwrap();
        let back = NeuralModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());
        let tampered = m.to_json().unwrap().replace(
            "\"time_of_day\",\"day_of_week\"",
            "\"day_of_week\",\"time_of_day\"",
        );
        assert!(NeuralModel::from_json(&tampered).is_err());
    }
}
