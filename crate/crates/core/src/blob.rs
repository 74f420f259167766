//! Binary interchange format shared by parameter checkpoints and dataset
//! dumps: one line of compact JSON (the header, terminated by `\n`)
//! followed by a little-endian `f64` payload. The header carries the payload
//! length under `"len"` so readers can validate the file.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    format: String,
    len: usize,
    header: H,
}

const FORMAT_TAG: &str = "bilevel-gr/f64le/v1";

pub fn write_blob<W: Write, H: Serialize>(mut w: W, header: &H, payload: &[f64]) -> Result<()> {
    let env = Envelope {
        format: FORMAT_TAG.to_string(),
        len: payload.len(),
        header,
    };
    let line = serde_json::to_string(&env)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_blob<R: Read, H: DeserializeOwned>(r: R) -> Result<(H, Vec<f64>)> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Format("missing header line".into()));
    }
    let env: Envelope<H> = serde_json::from_str(line.trim_end())?;
    if env.format != FORMAT_TAG {
        return Err(Error::Format(format!("unknown format tag {:?}", env.format)));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != env.len * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header promises {} values",
            bytes.len(),
            env.len
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((env.header, data))
}

pub fn save<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_blob(&mut buf, header, payload)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    read_blob(fs::File::open(path)?)
}
