//! JSON checkpoint files: an ordered map from parameter id to shape, row-major
//! values and trainability. Values are written with shortest round-trip
//! formatting, so save then load reproduces every bit.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParamStore, Tensor};

pub fn to_json(store: &ParamStore) -> Result<String> {
    let mut map = Map::new();
    for p in store.iter() {
        if !p.tensor.is_finite() {
            return Err(Error::contract(format!("parameter {} has non-finite values", p.id)));
        }
        map.insert(
            p.id.clone(),
            json!({ "shape": p.tensor.shape(), "values": p.tensor.data(), "trainable": p.trainable }),
        );
    }
    Ok(serde_json::to_string(&Value::Object(map))?)
}

pub fn from_json(text: &str) -> Result<ParamStore> {
    let root: Value = serde_json::from_str(text)?;
    let map = root.as_object().ok_or_else(|| Error::Validation("checkpoint root is not an object".into()))?;
    let mut store = ParamStore::new();
    for (id, entry) in map {
        let shape: Vec<usize> = serde_json::from_value(entry.get("shape").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Validation(format!("{id}: bad shape: {e}")))?;
        let values: Vec<f64> = serde_json::from_value(entry.get("values").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Validation(format!("{id}: bad values: {e}")))?;
        let trainable = entry.get("trainable").and_then(Value::as_bool).unwrap_or(true);
        let t = Tensor::new(shape, values).map_err(|e| Error::Validation(format!("{id}: {e}")))?;
        store.insert(id.clone(), t, trainable)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_json(store)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    from_json(&fs::read_to_string(path)?)
}
