//! Checkpoint directories: `manifest.txt` (UTF-8 `key = value` lines) and
//! `tensors.bin` (per tensor: `u32` rank, `u64` dims, then little-endian
//! `f64` values).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{Component, ParamStore};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const TENSORS: &str = "tensors.bin";
const FORMAT: &str = "sasrecllm-checkpoint/1";
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub component: Component,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub stage: String,
    pub monitor: String,
    pub monitor_value: Option<Real>,
    /// Configuration digest of every component present.
    pub hashes: BTreeMap<Component, String>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Snapshot of the listed components (all present components if empty).
    pub fn capture(
        store: &ParamStore,
        hashes: &BTreeMap<Component, String>,
        components: &[Component],
    ) -> Result<Self> {
        let wanted: Vec<Component> = if components.is_empty() {
            store.components()
        } else {
            components.to_vec()
        };
        let mut kept = BTreeMap::new();
        for c in &wanted {
            let h = hashes
                .get(c)
                .ok_or_else(|| Error::checkpoint(format!("hash.{}", c.name()), "no hash supplied"))?;
            kept.insert(*c, h.clone());
        }
        let tensors = store
            .iter()
            .filter(|(_, p)| kept.contains_key(&p.component))
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                component: p.component,
                value: p.value.clone(),
            })
            .collect();
        Ok(Self {
            epoch: 0,
            stage: String::new(),
            monitor: String::new(),
            monitor_value: None,
            hashes: kept,
            tensors,
        })
    }

    pub fn components(&self) -> Vec<Component> {
        self.hashes.keys().copied().collect()
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = {FORMAT}");
        let _ = writeln!(s, "dtype = {DTYPE}");
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "stage = {}", self.stage);
        let _ = writeln!(s, "monitor = {}", self.monitor);
        let mv = self.monitor_value.map_or_else(|| "none".to_string(), |v| format!("{v:?}"));
        let _ = writeln!(s, "monitor_value = {mv}");
        let names: Vec<&str> = self.hashes.keys().map(|c| c.name()).collect();
        let _ = writeln!(s, "components = {}", names.join(","));
        for (c, h) in &self.hashes {
            let _ = writeln!(s, "hash.{} = {h}", c.name());
        }
        let _ = writeln!(s, "tensors = {}", self.tensors.len());
        for (k, t) in self.tensors.iter().enumerate() {
            let dims: Vec<String> = t.value.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(
                s,
                "tensor.{k} = {} {} {}",
                t.name,
                t.component.name(),
                dims.join("x")
            );
        }
        s
    }

    pub fn tensor_bytes(&self) -> Vec<u8> {
        let total: usize = self
            .tensors
            .iter()
            .map(|t| 4 + 8 * t.value.shape().len() + 8 * t.value.data().len())
            .sum();
        let mut out = Vec::with_capacity(total);
        for t in &self.tensors {
            out.extend_from_slice(&(t.value.shape().len() as u32).to_le_bytes());
            for &d in t.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join(MANIFEST);
        fs::write(&m, self.manifest_text()).map_err(|e| Error::io(&m, e))?;
        let t = dir.join(TENSORS);
        fs::write(&t, self.tensor_bytes()).map_err(|e| Error::io(&t, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = dir.join(MANIFEST);
        let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let t = dir.join(TENSORS);
        let bytes = fs::read(&t).map_err(|e| Error::io(&t, e))?;
        Self::parse(&text, &bytes)
    }

    pub fn parse(manifest: &str, bytes: &[u8]) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for (no, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::checkpoint(format!("line {}", no + 1), "expected `key = value`"))?;
            if kv.insert(k.trim(), v.trim()).is_some() {
                return Err(Error::checkpoint(k.trim(), "duplicate key"));
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::checkpoint(k, "missing"));
        if get("format")? != FORMAT {
            return Err(Error::checkpoint("format", format!("unsupported `{}`", get("format")?)));
        }
        if get("dtype")? != DTYPE {
            return Err(Error::checkpoint("dtype", format!("unsupported `{}`", get("dtype")?)));
        }
        let epoch = get("epoch")?
            .parse()
            .map_err(|_| Error::checkpoint("epoch", "not an integer"))?;
        let monitor_value = match get("monitor_value")? {
            "none" => None,
            v => Some(
                v.parse()
                    .map_err(|_| Error::checkpoint("monitor_value", "not a number"))?,
            ),
        };
        let mut hashes = BTreeMap::new();
        for name in get("components")?.split(',').filter(|s| !s.is_empty()) {
            let c = Component::parse(name)
                .map_err(|_| Error::checkpoint("components", format!("unknown component `{name}`")))?;
            let key = format!("hash.{name}");
            hashes.insert(c, get(&key)?.to_string());
        }
        let count: usize = get("tensors")?
            .parse()
            .map_err(|_| Error::checkpoint("tensors", "not an integer"))?;
        let mut reader = ByteReader { bytes, pos: 0 };
        let mut tensors = Vec::with_capacity(count);
        for k in 0..count {
            let field = format!("tensor.{k}");
            let spec = get(&field)?;
            let parts: Vec<&str> = spec.split(' ').collect();
            let [name, comp, dims] = parts[..] else {
                return Err(Error::checkpoint(field, "expected `name component dims`"));
            };
            let component = Component::parse(comp)
                .map_err(|_| Error::checkpoint(&field, format!("unknown component `{comp}`")))?;
            if !hashes.contains_key(&component) {
                return Err(Error::checkpoint(&field, format!("component `{comp}` not listed")));
            }
            let shape: Vec<usize> = dims
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::checkpoint(&field, format!("bad shape `{dims}`")))?;
            let rank = reader.u32(&field)? as usize;
            let stored: Vec<usize> = (0..rank)
                .map(|_| reader.u64(&field).map(|d| d as usize))
                .collect::<Result<_>>()?;
            if stored != shape {
                return Err(Error::checkpoint(
                    &field,
                    format!("manifest shape {shape:?} but tensor data has {stored:?}"),
                ));
            }
            let n = shape.iter().product();
            let data = (0..n).map(|_| reader.f64(&field)).collect::<Result<Vec<_>>>()?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                component,
                value: Tensor::new(shape, data)?,
            });
        }
        if reader.pos != bytes.len() {
            return Err(Error::checkpoint(
                TENSORS,
                format!("{} trailing bytes", bytes.len() - reader.pos),
            ));
        }
        Ok(Self {
            epoch,
            stage: get("stage")?.to_string(),
            monitor: get("monitor")?.to_string(),
            monitor_value,
            hashes,
            tensors,
        })
    }

    /// Copies the given components (all in the checkpoint if empty) into
    /// `store`. Nothing is modified unless every check passes.
    pub fn restore(
        &self,
        store: &mut ParamStore,
        hashes: &BTreeMap<Component, String>,
        components: &[Component],
    ) -> Result<()> {
        let wanted: Vec<Component> = if components.is_empty() {
            self.components()
        } else {
            components.to_vec()
        };
        let mut plan = Vec::new();
        for c in &wanted {
            let field = format!("hash.{}", c.name());
            let saved = self
                .hashes
                .get(c)
                .ok_or_else(|| Error::checkpoint(&field, "component not in checkpoint"))?;
            match hashes.get(c) {
                Some(h) if h == saved => {}
                Some(_) => {
                    return Err(Error::checkpoint(
                        field,
                        "configuration differs from the target system (dimensions or layout changed)",
                    ))
                }
                None => return Err(Error::checkpoint(field, "component absent from the target system")),
            }
            let expected = store.ids_of(*c).len();
            let mut found = 0;
            for t in self.tensors.iter().filter(|t| t.component == *c) {
                let id = store
                    .find(&t.name)
                    .ok_or_else(|| Error::checkpoint(&t.name, "no such parameter in the target"))?;
                if store.get(id).value.shape() != t.value.shape() {
                    return Err(Error::checkpoint(
                        &t.name,
                        format!(
                            "shape {:?} does not match target {:?}",
                            t.value.shape(),
                            store.get(id).value.shape()
                        ),
                    ));
                }
                plan.push((id, &t.value));
                found += 1;
            }
            if found != expected {
                return Err(Error::checkpoint(
                    format!("component.{}", c.name()),
                    format!("checkpoint has {found} tensors, target has {expected}"),
                ));
            }
        }
        for (id, v) in plan {
            *store.value_mut(id) = v.clone();
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::checkpoint(field, "tensor data truncated"))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length"))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        self.take::<4>(field).map(u32::from_le_bytes)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        self.take::<8>(field).map(u64::from_le_bytes)
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        self.take::<8>(field).map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, BTreeMap<Component, String>) {
        let mut s = ParamStore::new();
        s.add("a.w", Component::Sasrec, Tensor::vector(vec![1.0, -2.5, 1e-300]));
        s.add("b.w", Component::Lora, Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap());
        let h = [(Component::Sasrec, "h1".to_string()), (Component::Lora, "h2".to_string())]
            .into_iter()
            .collect();
        (s, h)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (s, h) = store();
        let mut c = Checkpoint::capture(&s, &h, &[]).unwrap();
        c.epoch = 8;
        c.monitor = "auc".into();
        c.monitor_value = Some(0.1 + 0.2);
        let again = Checkpoint::parse(&c.manifest_text(), &c.tensor_bytes()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.manifest_text(), c.manifest_text());
        assert_eq!(again.tensor_bytes(), c.tensor_bytes());
    }

    #[test]
    fn corrupt_inputs_name_the_field() {
        let (s, h) = store();
        let c = Checkpoint::capture(&s, &h, &[]).unwrap();
        let bytes = c.tensor_bytes();
        let err = Checkpoint::parse(&c.manifest_text(), &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("tensor.1"), "{err}");
        let bad = c.manifest_text().replace("components = sasrec,lora", "components = sasrec,unet");
        let err = Checkpoint::parse(&bad, &bytes).unwrap_err();
        assert!(err.to_string().contains("components"), "{err}");
    }

    #[test]
    fn partial_restore_touches_one_component() {
        let (s, h) = store();
        let c = Checkpoint::capture(&s, &h, &[Component::Lora]).unwrap();
        let (mut t, _) = store();
        for id in t.ids().collect::<Vec<_>>() {
            t.value_mut(id).scale_assign(3.0);
        }
        let before_a = t.value(t.find("a.w").unwrap()).clone();
        c.restore(&mut t, &h, &[]).unwrap();
        assert!(t.value(t.find("a.w").unwrap()).bit_eq(&before_a));
        assert!(t.value(t.find("b.w").unwrap()).bit_eq(s.value(s.find("b.w").unwrap())));
        let mut wrong = h.clone();
        wrong.insert(Component::Lora, "other".into());
        assert!(c.restore(&mut t, &wrong, &[]).is_err());
    }
}
