//! Named-tensor archive.
//!
//! Layout: a UTF-8 manifest
//!
//! ```text
//! vimco-archive 1
//! meta <key> <value...>
//! tensor <name> <rank> <dim>... <byte offset>
//! end
//! ```
//!
//! followed by the tensors as little-endian `f64` blocks. Offsets count from
//! the first byte after the `end` line.

use std::io::Write;
use std::path::Path;

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::sbn::{Proposal, SbnModel, SbnProposal, SbnSystem};

const HEADER: &str = "vimco-archive 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::Format(format!("archive names must be non-empty without spaces: {name:?}")));
    }
    Ok(())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        check_name(key)?;
        let value = value.to_string();
        if value.contains('\n') {
            return Err(Error::Format("meta values must be single-line".into()));
        }
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| Error::Format(format!("archive lacks meta key {key:?}")))
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        check_name(name)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{name}: shape {shape:?} vs {} values", data.len())));
        }
        match self.tensors.iter_mut().find(|(n, _, _)| n == name) {
            Some(slot) => *slot = (name.to_string(), shape, data),
            None => self.tensors.push((name.to_string(), shape, data)),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn require(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name).ok_or_else(|| Error::Format(format!("archive lacks tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    /// Stores a `u64` losslessly as its two 32-bit halves.
    pub fn insert_u64(&mut self, name: &str, v: u64) -> Result<()> {
        self.insert(name, vec![2], vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64])
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        match self.require(name)? {
            (_, [hi, lo]) => Ok(((*hi as u64) << 32) | (*lo as u64)),
            _ => Err(Error::Format(format!("{name} is not a split u64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{HEADER}\n");
        for (k, v) in &self.meta {
            head += &format!("meta {k} {v}\n");
        }
        let mut offset = 0usize;
        for (name, shape, data) in &self.tensors {
            let mut fields = vec!["tensor".to_string(), name.clone(), shape.len().to_string()];
            fields.extend(shape.iter().map(usize::to_string));
            fields.push(offset.to_string());
            head += &fields.join(" ");
            head.push('\n');
            offset += data.len() * 8;
        }
        head += "end\n";
        let mut out = head.into_bytes();
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = find_manifest_end(bytes)?;
        let manifest = std::str::from_utf8(&bytes[..end]).map_err(|e| Error::Format(e.to_string()))?;
        let body = &bytes[end..];
        let mut lines = manifest.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format("not a tensor archive".into()));
        }
        let mut out = Archive::new();
        for line in lines {
            let mut it = line.split(' ');
            match it.next() {
                Some("meta") => {
                    let key = it.next().ok_or_else(|| Error::Format("meta line without key".into()))?;
                    let value: Vec<&str> = it.collect();
                    out.set_meta(key, value.join(" "))?;
                }
                Some("tensor") => {
                    let fields: Vec<&str> = it.collect();
                    let bad = || Error::Format(format!("malformed tensor line {line:?}"));
                    let name = *fields.first().ok_or_else(bad)?;
                    let nums = fields[1..]
                        .iter()
                        .map(|f| f.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?;
                    let rank = *nums.first().ok_or_else(bad)?;
                    if nums.len() != rank + 2 {
                        return Err(bad());
                    }
                    let shape = nums[1..=rank].to_vec();
                    let offset = nums[rank + 1];
                    let len: usize = shape.iter().product();
                    let block = body
                        .get(offset..offset + 8 * len)
                        .ok_or_else(|| Error::Format(format!("tensor {name} runs past the end of the archive")))?;
                    let data = block
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    out.insert(name, shape, data)?;
                }
                Some("end") => break,
                _ => return Err(Error::Format(format!("unexpected manifest line {line:?}"))),
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn find_manifest_end(bytes: &[u8]) -> Result<usize> {
    let marker = b"\nend\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
        .ok_or_else(|| Error::Format("archive manifest is not terminated".into()))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad size list {s:?}"))))
        .collect()
}

/// Adds the model and proposal (with architecture metadata) to `archive`.
pub fn store_system(archive: &mut Archive, system: &SbnSystem) -> Result<()> {
    let d = system.dims();
    archive.set_meta("model.latent", join(&d.latent))?;
    archive.set_meta("model.observation", d.observation)?;
    archive.set_meta("model.context", d.context)?;
    let kind = match &system.proposal {
        Proposal::Prior => "prior",
        Proposal::Learned(q) if q.dims().is_conditional() => "sop",
        Proposal::Learned(_) => "generative",
    };
    archive.set_meta("proposal.kind", kind)?;
    for (name, shape, data) in system.model.net().named_tensors() {
        archive.insert(&format!("model.{name}"), shape, data)?;
    }
    if let Proposal::Learned(q) = &system.proposal {
        for (name, shape, data) in q.net().named_tensors() {
            archive.insert(&format!("proposal.{name}"), shape, data)?;
        }
    }
    Ok(())
}

pub fn load_system(archive: &Archive) -> Result<SbnSystem> {
    let latent = parse_list(archive.require_meta("model.latent")?)?;
    let num = |k: &str| -> Result<usize> {
        archive
            .require_meta(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad value for {k}")))
    };
    let observation = num("model.observation")?;
    let context = num("model.context")?;
    let lookup = |prefix: &'static str| {
        move |name: &str| {
            archive
                .get(&format!("{prefix}.{name}"))
                .map(|(s, d)| (s.to_vec(), d.to_vec()))
        }
    };
    let mut model = SbnModel::new(&latent, observation, context)?;
    model.net_mut().load_named(&lookup("model"))?;
    let proposal = match archive.require_meta("proposal.kind")? {
        "prior" => Proposal::Prior,
        kind => {
            let mut q = match kind {
                "sop" => SbnProposal::new_sop(&latent, observation, context)?,
                "generative" => SbnProposal::new_generative(&latent, observation)?,
                other => return Err(Error::Format(format!("unknown proposal kind {other:?}"))),
            };
            q.net_mut().load_named(&lookup("proposal"))?;
            Proposal::Learned(q)
        }
    };
    SbnSystem::new(model, proposal)
}

/// Convenience for 1-D tensors.
pub fn vector(archive: &Archive, name: &str) -> Result<Array1<f64>> {
    Ok(Array1::from(archive.require(name)?.1.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let mut a = Archive::new();
        a.set_meta("note", "two words").unwrap();
        a.insert("w", vec![2, 3], (0..6).map(|i| i as f64 * 0.5 - 1.0).collect()).unwrap();
        a.insert("s", vec![], vec![f64::MIN_POSITIVE]).unwrap();
        a.insert_u64("seed", u64::MAX - 12345).unwrap();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.get_u64("seed").unwrap(), u64::MAX - 12345);
        assert_eq!(b.meta("note"), Some("two words"));
        assert!(a.insert("bad name", vec![1], vec![0.0]).is_err());
        assert!(a.insert("x", vec![2], vec![0.0]).is_err());
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Archive::from_bytes(b"junk").is_err());
    }

    #[test]
    fn systems_round_trip() {
        use crate::oracle::toys::{random_instance, ToyKind};
        for (i, kind) in [ToyKind::Generative, ToyKind::SopLearned, ToyKind::SopPrior].into_iter().enumerate() {
            let mut t = random_instance(i as u64, kind, &[3, 2], 5, 2, 1.0).unwrap();
            if let Proposal::Learned(q) = &mut t.system.proposal {
                let ctx = q.dims().is_conditional().then(|| Array1::from_elem(2, 0.5));
                q.set_input_centering(Some(Array1::from_elem(5, 0.25)), ctx).unwrap();
            }
            let mut a = Archive::new();
            store_system(&mut a, &t.system).unwrap();
            let back = load_system(&Archive::from_bytes(&a.to_bytes()).unwrap()).unwrap();
            assert_eq!(back, t.system);
        }
    }
}
