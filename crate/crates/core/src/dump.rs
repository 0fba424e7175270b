//! Binary CSI dumps and CSV exports.
//!
//! A dump is little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "CSIDUMP1"
//! records    u32
//! per record:
//!   kind     u32      1 = CSI stream, 2 = feature matrices
//!   id       u32      receiver id (0 for feature records)
//!   frames   u32      U
//!   rows     u32      M (antennas)
//!   cols     u32      N (subcarriers)
//!   noise    f64      noise variance (0 for feature records)
//!   U x f64           timestamps, seconds
//!   U x f64           phase errors, radians
//!   U*M*N x (f32, f32) frame-major, then antenna, then subcarrier
//! ```
//!
//! CSI values are stored as complex64 `(re, im)`; feature records reuse the
//! same pair layout as `(phase, amplitude)`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;

use crate::channel::CsiStream;
use crate::cmatrix::{CMatrix, RMatrix};
use crate::error::{Error, Result};
use crate::smsp::FeatureMatrix;
use crate::spectral::Spectrum;

pub const MAGIC: &[u8; 8] = b"CSIDUMP1";
const KIND_CSI: u32 = 1;
const KIND_FEATURES: u32 = 2;
/// Guard against absurd headers before allocating.
const MAX_VALUES: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Csi(CsiStream),
    Features(Vec<FeatureMatrix>),
}

fn header(w: &mut impl Write, kind: u32, id: usize, frames: usize, dims: (usize, usize), noise: f64) -> Result<()> {
    w.write_u32::<LittleEndian>(kind)?;
    for v in [id, frames, dims.0, dims.1] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        w.write_u32::<LittleEndian>(v)?;
    }
    w.write_f64::<LittleEndian>(noise)?;
    Ok(())
}

pub fn write_dump(w: &mut impl Write, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(records.len() as u32)?;
    for rec in records {
        match rec {
            Record::Csi(s) => {
                let dims = s.dims();
                if s.frames.iter().any(|f| f.shape() != dims)
                    || s.timestamps_s.len() != s.len()
                    || s.phase_errors_rad.len() != s.len()
                {
                    return Err(Error::Format(format!("stream {} is ragged", s.receiver_id)));
                }
                header(w, KIND_CSI, s.receiver_id, s.len(), dims, s.noise_var)?;
                for t in s.timestamps_s.iter().chain(&s.phase_errors_rad) {
                    w.write_f64::<LittleEndian>(*t)?;
                }
                for f in &s.frames {
                    for z in f.as_slice() {
                        w.write_f32::<LittleEndian>(z.re as f32)?;
                        w.write_f32::<LittleEndian>(z.im as f32)?;
                    }
                }
            }
            Record::Features(fs) => {
                let dims = fs.first().map_or((0, 0), FeatureMatrix::shape);
                if fs.iter().any(|f| f.shape() != dims || f.h_am.shape() != dims) {
                    return Err(Error::Format("feature matrices differ in shape".into()));
                }
                header(w, KIND_FEATURES, 0, fs.len(), dims, 0.0)?;
                for _ in 0..2 * fs.len() {
                    w.write_f64::<LittleEndian>(0.0)?;
                }
                for f in fs {
                    for (p, a) in f.h_ph.as_slice().iter().zip(f.h_am.as_slice()) {
                        w.write_f32::<LittleEndian>(*p as f32)?;
                        w.write_f32::<LittleEndian>(*a as f32)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(r.read_u32::<LittleEndian>().map_err(truncated)? as usize)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("dump is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_dump(r: &mut impl Read) -> Result<Vec<Record>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a CSIDUMP1 file".into()));
    }
    let n = read_u32(r)?;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let kind = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let id = read_u32(r)?;
        let frames = read_u32(r)?;
        let (rows, cols) = (read_u32(r)?, read_u32(r)?);
        let noise = r.read_f64::<LittleEndian>().map_err(truncated)?;
        if (frames as u64) * (rows as u64) * (cols as u64) > MAX_VALUES {
            return Err(Error::Format("record header is implausibly large".into()));
        }
        let mut times = vec![0.0; 2 * frames];
        r.read_f64_into::<LittleEndian>(&mut times).map_err(truncated)?;
        let mut raw = vec![0f32; 2 * frames * rows * cols];
        r.read_f32_into::<LittleEndian>(&mut raw).map_err(truncated)?;
        let per = 2 * rows * cols;
        match kind {
            KIND_CSI => {
                let frames_vec = (0..frames)
                    .map(|q| {
                        let data = raw[q * per..(q + 1) * per]
                            .chunks(2)
                            .map(|c| Complex64::new(c[0] as f64, c[1] as f64))
                            .collect();
                        CMatrix::from_vec(rows, cols, data)
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(Record::Csi(CsiStream {
                    receiver_id: id,
                    frames: frames_vec,
                    timestamps_s: times[..frames].to_vec(),
                    phase_errors_rad: times[frames..].to_vec(),
                    noise_var: noise,
                }));
            }
            KIND_FEATURES => {
                let fs = (0..frames)
                    .map(|q| {
                        let chunk = &raw[q * per..(q + 1) * per];
                        let ph = chunk.iter().step_by(2).map(|v| *v as f64).collect();
                        let am = chunk.iter().skip(1).step_by(2).map(|v| *v as f64).collect();
                        Ok(FeatureMatrix {
                            h_ph: RMatrix::from_vec(rows, cols, ph)?,
                            h_am: RMatrix::from_vec(rows, cols, am)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(Record::Features(fs));
            }
            k => return Err(Error::Format(format!("unknown record kind {k}"))),
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn write_streams(w: &mut impl Write, streams: &[CsiStream]) -> Result<()> {
    let recs: Vec<Record> = streams.iter().cloned().map(Record::Csi).collect();
    write_dump(w, &recs)
}

/// Read a dump that must contain only CSI streams.
pub fn read_streams(r: &mut impl Read) -> Result<Vec<CsiStream>> {
    read_dump(r)?
        .into_iter()
        .map(|rec| match rec {
            Record::Csi(s) => Ok(s),
            Record::Features(_) => Err(Error::Format("expected CSI records, found features".into())),
        })
        .collect()
}

/// `theta_deg` rows against `tau_ns` columns.
pub fn spectrum_csv(s: &Spectrum) -> String {
    let mut out = String::from("theta_deg");
    for t in &s.taus_ns {
        out.push_str(&format!(",{t}"));
    }
    out.push('\n');
    for (i, th) in s.thetas_deg.iter().enumerate() {
        out.push_str(&th.to_string());
        for j in 0..s.taus_ns.len() {
            out.push_str(&format!(",{}", s.get(i, j)));
        }
        out.push('\n');
    }
    out
}

/// Phase block then amplitude block; one row per antenna, one column per subcarrier.
pub fn feature_csv(f: &FeatureMatrix) -> String {
    let (m, n) = f.shape();
    let mut out = String::from("block,antenna");
    for c in 0..n {
        out.push_str(&format!(",sc{c}"));
    }
    out.push('\n');
    for (name, mat) in [("phase_rad", &f.h_ph), ("amplitude", &f.h_am)] {
        for r in 0..m {
            out.push_str(&format!("{name},{r}"));
            for c in 0..n {
                out.push_str(&format!(",{}", mat[(r, c)]));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream() -> CsiStream {
        CsiStream {
            receiver_id: 7,
            frames: (0..2)
                .map(|q| CMatrix::from_fn(3, 4, |r, c| Complex64::new(r as f64 + q as f64, c as f64 * 0.5)))
                .collect(),
            timestamps_s: vec![0.0, 0.01],
            phase_errors_rad: vec![0.25, -1.5],
            noise_var: 0.125,
        }
    }

    #[test]
    fn csi_round_trip() {
        let s = stream();
        let mut buf = Vec::new();
        write_streams(&mut buf, std::slice::from_ref(&s)).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 * 5 + 8 + 4 * 8 + 2 * 12 * 8);
        assert_eq!(read_streams(&mut buf.as_slice()).unwrap(), vec![s]);
    }

    #[test]
    fn feature_round_trip() {
        let f = FeatureMatrix {
            h_ph: RMatrix::from_fn(2, 3, |r, c| r as f64 - c as f64),
            h_am: RMatrix::from_fn(2, 3, |r, c| (r * c) as f64 + 0.5),
        };
        let mut buf = Vec::new();
        write_dump(&mut buf, &[Record::Features(vec![f.clone()])]).unwrap();
        assert_eq!(read_dump(&mut buf.as_slice()).unwrap(), vec![Record::Features(vec![f])]);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_streams(&mut buf, &[stream()]).unwrap();
        assert!(read_dump(&mut &buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_dump(&mut extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_dump(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn feature_csv_has_two_blocks() {
        let f = FeatureMatrix {
            h_ph: RMatrix::zeros(3, 2),
            h_am: RMatrix::zeros(3, 2),
        };
        let csv = feature_csv(&f);
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(csv.lines().filter(|l| l.starts_with("amplitude")).count(), 3);
    }
}
