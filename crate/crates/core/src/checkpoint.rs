//! CLDNN checkpoints: embedded model config, training metadata, every
//! parameter and the batch-norm running statistics at single precision.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_kv, parse_value, ConfigSection};
use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::model::{CldnnModel, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    /// Dev `(FAR+FRR)/2` as a fraction.
    pub dev_metric: f64,
}

fn running_records(model: &CldnnModel) -> Vec<Record> {
    let mut out = Vec::new();
    for (name, bn) in [("time_bn", &model.time_bn), ("freq_bn", &model.freq_bn)] {
        let c = bn.channels();
        out.push(Record::from_f64(format!("{name}.running_mean"), &[c], &bn.running_mean));
        out.push(Record::from_f64(format!("{name}.running_var"), &[c], &bn.running_var));
    }
    out
}

pub fn to_container(model: &CldnnModel, meta: &TrainingMeta) -> Container {
    let mut header = String::from("kind = cldnn\n");
    for (k, v) in model.config.entries() {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str(&format!(
        "epoch = {}\nseed = {}\ndev_metric = {}\n",
        meta.epoch, meta.seed, meta.dev_metric
    ));
    let mut c = Container::new(header);
    for p in model.params.iter() {
        c.push(Record::from_f64(p.name.clone(), p.value.shape(), p.value.data()));
    }
    for r in running_records(model) {
        c.push(r);
    }
    c
}

pub fn from_container(c: &Container) -> Result<(CldnnModel, TrainingMeta)> {
    let mut config = ModelConfig::default();
    let mut meta = TrainingMeta::default();
    let mut kind = None;
    for (_, k, v) in parse_kv(&c.header, Path::new("<checkpoint header>"))? {
        match k.as_str() {
            "kind" => kind = Some(v),
            "epoch" => meta.epoch = parse_value(&k, &v)?,
            "seed" => meta.seed = parse_value(&k, &v)?,
            "dev_metric" => meta.dev_metric = parse_value(&k, &v)?,
            _ => {
                if !config.set(&k, &v)? {
                    return Err(Error::Checkpoint(format!("unknown config key '{k}'")));
                }
            }
        }
    }
    if kind.as_deref() != Some("cldnn") {
        return Err(Error::Checkpoint("file does not hold a CLDNN model".into()));
    }
    let mut model = CldnnModel::build(&config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;
    let mut expected: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    expected.extend(running_records(&model).into_iter().map(|r| (r.name, r.dims)));
    if c.records.len() != expected.len() {
        let missing: Vec<_> = expected
            .iter()
            .filter(|(n, _)| c.get(n).is_none())
            .map(|(n, _)| n.as_str())
            .collect();
        return Err(Error::Checkpoint(format!(
            "expected {} records, found {} (missing: {missing:?})",
            expected.len(),
            c.records.len()
        )));
    }
    for (name, dims) in &expected {
        let r = c
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record '{name}'")))?;
        if &r.dims != dims {
            return Err(Error::Checkpoint(format!(
                "record '{name}': shape {:?} does not match embedded config {:?}",
                r.dims, dims
            )));
        }
        if r.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("record '{name}': non-finite value")));
        }
    }
    for p in model.params.iter_mut() {
        let r = c.get(&p.name).expect("checked above");
        p.value = Tensor::new(r.dims.clone(), r.to_f64())?;
    }
    for (name, bn) in [("time_bn", &mut model.time_bn), ("freq_bn", &mut model.freq_bn)] {
        bn.running_mean = c.get(&format!("{name}.running_mean")).expect("checked").to_f64();
        bn.running_var = c.get(&format!("{name}.running_var")).expect("checked").to_f64();
    }
    Ok((model, meta))
}

pub fn save_checkpoint(model: &CldnnModel, meta: &TrainingMeta, path: &Path) -> Result<()> {
    to_container(model, meta).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(CldnnModel, TrainingMeta)> {
    from_container(&Container::load(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_seeded, tiny_config};

    #[test]
    fn round_trip_at_single_precision() {
        let mut m = build_seeded(&tiny_config(), 3).unwrap();
        m.time_bn.running_mean[0] = 0.123456789;
        let meta = TrainingMeta {
            epoch: 4,
            seed: 9,
            dev_metric: 0.25,
        };
        let bytes = to_container(&m, &meta).to_bytes().unwrap();
        let (back, meta2) = from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.config, m.config);
        for (a, b) in back.params.iter().zip(m.params.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert_eq!(back.time_bn.running_mean[0], 0.123_456_79_f32 as f64);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = build_seeded(&tiny_config(), 3).unwrap();
        let mut c = to_container(&m, &TrainingMeta::default());
        c.header = c.header.replace("lstm_size = 4", "lstm_size = 5");
        let err = from_container(&c).unwrap_err().to_string();
        assert!(err.contains("does not match embedded config"), "{err}");
    }
}
