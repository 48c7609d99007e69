//! Dataset serialization: a flat binary container and a JSON-lines form.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic "CDTASK01" | u32 spec_json_len | spec json bytes
//! u32 instance_count
//! per instance: u8 split (0 train, 1 eval) | u32 len | len x u32 tokens | len x u32 targets
//! ```

use std::io::{Read, Write};

use super::{Split, TaskDataset, TaskInstance, TaskSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CDTASK01";

pub fn write_binary(data: &TaskDataset, mut w: impl Write) -> Result<()> {
    let spec_json = serde_json::to_vec(&data.spec)?;
    w.write_all(MAGIC)?;
    w.write_all(&(spec_json.len() as u32).to_le_bytes())?;
    w.write_all(&spec_json)?;
    w.write_all(&(data.instances.len() as u32).to_le_bytes())?;
    for inst in &data.instances {
        let split = match inst.split {
            Split::Train => 0u8,
            Split::Eval => 1u8,
        };
        w.write_all(&[split])?;
        w.write_all(&(inst.tokens.len() as u32).to_le_bytes())?;
        for t in &inst.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
        for t in &inst.targets {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_binary(mut r: impl Read) -> Result<TaskDataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Other("not a task container (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let spec_len = u32::from_le_bytes(u32buf) as usize;
    let mut spec_json = vec![0u8; spec_len];
    r.read_exact(&mut spec_json)?;
    let spec: TaskSpec = serde_json::from_slice(&spec_json)?;

    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let mut split_byte = [0u8; 1];
        r.read_exact(&mut split_byte)?;
        let split = match split_byte[0] {
            0 => Split::Train,
            1 => Split::Eval,
            other => return Err(Error::Other(format!("bad split byte {other}"))),
        };
        r.read_exact(&mut u32buf)?;
        let len = u32::from_le_bytes(u32buf) as usize;
        let read_vec = |r: &mut dyn Read| -> Result<Vec<u32>> {
            let mut out = Vec::with_capacity(len);
            let mut buf = [0u8; 4];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                out.push(u32::from_le_bytes(buf));
            }
            Ok(out)
        };
        let tokens = read_vec(&mut r)?;
        let targets = read_vec(&mut r)?;
        instances.push(TaskInstance { tokens, targets, split });
    }
    Ok(TaskDataset { spec, instances })
}

/// One JSON object per instance, for eyeballing.
pub fn write_jsonl(data: &TaskDataset, mut w: impl Write) -> Result<()> {
    for inst in &data.instances {
        let line = serde_json::to_string(inst)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::generate;
    use super::*;

    #[test]
    fn binary_round_trip() {
        let spec = TaskSpec {
            num_train_examples: 8,
            num_eval_examples: 2,
            seed: 5,
            ..TaskSpec::default()
        };
        let data = generate(&spec).unwrap();
        let mut buf = Vec::new();
        write_binary(&data, &mut buf).unwrap();
        let back = read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.spec, data.spec);
        assert_eq!(back.instances, data.instances);
    }

    #[test]
    fn jsonl_has_one_line_per_instance() {
        let spec = TaskSpec {
            num_train_examples: 3,
            num_eval_examples: 2,
            seed: 6,
            ..TaskSpec::default()
        };
        let data = generate(&spec).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_binary(&b"NOTATASK...."[..]).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }
}
