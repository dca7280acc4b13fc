//! Event-log file formats.
//!
//! Every log starts with a `# run_id=<id>` comment naming the run manifest
//! that produced it, followed by a CSV header. Preparation and announcement
//! logs can also be written packed: 3-bit symbols, ten per little-endian
//! 30-bit word, with the symbol count as a trailing u64.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::channel::EveObservation;
use crate::config::Axis;
use crate::error::{Error, Result};
use crate::model::{
    AlicePreparation, Announcement, Basis, IntensityClass, PolarizationState, SlotClass,
};
use crate::session::{CountRateTimeline, DetectionRecord, SessionObserver};

pub const PREPARATIONS_CSV: &str = "preparations.csv";
pub const PREPARATIONS_PACKED: &str = "preparations.bin";
pub const ANNOUNCEMENTS_CSV: &str = "announcements.csv";
pub const ANNOUNCEMENTS_PACKED: &str = "announcements.bin";
pub const DETECTIONS_CSV: &str = "detections.csv";
pub const EVE_CSV: &str = "eve.csv";
pub const TRUTH_CSV: &str = "truth.csv";

const PREP_HEADER: &str = "slot_index,state_code";
const ANN_HEADER: &str = "slot_index,basis,intensity";
const DET_HEADER: &str = "detector,raw_tag";
const EVE_HEADER: &str = "slot_index,axis,bin_index";
const TRUTH_HEADER: &str = "detector,raw_tag,true_time_ps,receiver_time_ps,source_slot";

const MAGIC: &[u8; 4] = b"QKDP";
const KIND_PREP: u8 = 0;
const KIND_ANN: u8 = 1;

/// Announcement index to symbol and back; the vacuum symbol has no basis.
fn announcement_from_index(i: u8) -> Result<Announcement> {
    let (basis, intensity) = match i {
        0 => (Some(Basis::Circular), IntensityClass::Signal),
        1 => (Some(Basis::Linear), IntensityClass::Signal),
        2 => (Some(Basis::Circular), IntensityClass::Decoy),
        3 => (Some(Basis::Linear), IntensityClass::Decoy),
        4 => (None, IntensityClass::Vacuum),
        other => return Err(Error::InvalidStateCode(other)),
    };
    Ok(Announcement { basis, intensity })
}

pub fn write_csv_header(w: &mut impl Write, run_id: &str, header: &str) -> Result<()> {
    writeln!(w, "# run_id={run_id}")?;
    writeln!(w, "{header}")?;
    Ok(())
}

struct PackedWriter {
    w: BufWriter<File>,
    word: u32,
    in_word: u32,
    count: u64,
}

impl PackedWriter {
    fn create(path: &Path, kind: u8, run_id: &str) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[kind])?;
        let id = run_id.as_bytes();
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        Ok(Self {
            w,
            word: 0,
            in_word: 0,
            count: 0,
        })
    }

    fn push(&mut self, symbol: u8) -> Result<()> {
        self.word |= ((symbol & 7) as u32) << (3 * self.in_word);
        self.in_word += 1;
        self.count += 1;
        if self.in_word == 10 {
            self.w.write_all(&self.word.to_le_bytes())?;
            self.word = 0;
            self.in_word = 0;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if self.in_word > 0 {
            self.w.write_all(&self.word.to_le_bytes())?;
        }
        self.w.write_all(&self.count.to_le_bytes())?;
        self.w.flush()?;
        Ok(())
    }
}

fn read_packed(bytes: &[u8], kind: u8) -> Result<(String, Vec<u8>)> {
    let bad = |r: &str| Error::parse(0, r.to_string());
    if bytes.len() < 15 || &bytes[..4] != MAGIC {
        return Err(bad("not a packed log"));
    }
    if bytes[4] != kind {
        return Err(bad("packed log holds a different record kind"));
    }
    let id_len = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let body_start = 7 + id_len;
    if bytes.len() < body_start + 8 {
        return Err(bad("truncated packed log"));
    }
    let run_id = String::from_utf8_lossy(&bytes[7..body_start]).into_owned();
    let (body, tail) = bytes[body_start..].split_at(bytes.len() - body_start - 8);
    let count = u64::from_le_bytes(tail.try_into().expect("8 bytes")) as usize;
    if body.len() % 4 != 0 || body.len() / 4 != count.div_ceil(10) {
        return Err(bad("packed log length does not match its symbol count"));
    }
    let mut out = Vec::with_capacity(count);
    for chunk in body.chunks_exact(4) {
        let word = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        for k in 0..10 {
            if out.len() == count {
                break;
            }
            out.push(((word >> (3 * k)) & 7) as u8);
        }
    }
    Ok((run_id, out))
}

enum SymbolSink {
    Csv(BufWriter<File>),
    Packed(PackedWriter),
}

/// Streams a session to log files in `dir`.
pub struct LogWriter {
    preparations: SymbolSink,
    announcements: SymbolSink,
    detections: BufWriter<File>,
    eve: BufWriter<File>,
    truth: BufWriter<File>,
    pub rates: CountRateTimeline,
    paths: Vec<PathBuf>,
}

impl LogWriter {
    pub fn create(
        dir: &Path,
        run_id: &str,
        packed: bool,
        duration_s: f64,
        rate_bin_s: f64,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        let mut csv = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let mut w = BufWriter::with_capacity(1 << 20, File::create(&p)?);
            write_csv_header(&mut w, run_id, header)?;
            paths.push(p);
            Ok(w)
        };
        let (preparations, announcements) = if packed {
            (None, None)
        } else {
            (
                Some(csv(PREPARATIONS_CSV, PREP_HEADER)?),
                Some(csv(ANNOUNCEMENTS_CSV, ANN_HEADER)?),
            )
        };
        let detections = csv(DETECTIONS_CSV, DET_HEADER)?;
        let eve = csv(EVE_CSV, EVE_HEADER)?;
        let truth = csv(TRUTH_CSV, TRUTH_HEADER)?;
        let (preparations, announcements) = match (preparations, announcements) {
            (Some(p), Some(a)) => (SymbolSink::Csv(p), SymbolSink::Csv(a)),
            _ => {
                let pp = dir.join(PREPARATIONS_PACKED);
                let ap = dir.join(ANNOUNCEMENTS_PACKED);
                let s = (
                    SymbolSink::Packed(PackedWriter::create(&pp, KIND_PREP, run_id)?),
                    SymbolSink::Packed(PackedWriter::create(&ap, KIND_ANN, run_id)?),
                );
                paths.push(pp);
                paths.push(ap);
                s
            }
        };
        Ok(Self {
            preparations,
            announcements,
            detections,
            eve,
            truth,
            rates: CountRateTimeline::new(duration_s, rate_bin_s),
            paths,
        })
    }

    /// Flushes everything and returns the paths written.
    pub fn finish(self) -> Result<(Vec<PathBuf>, CountRateTimeline)> {
        for sink in [self.preparations, self.announcements] {
            match sink {
                SymbolSink::Csv(mut w) => w.flush()?,
                SymbolSink::Packed(p) => p.finish()?,
            }
        }
        for mut w in [self.detections, self.eve, self.truth] {
            w.flush()?;
        }
        Ok((self.paths, self.rates))
    }
}

impl SessionObserver for LogWriter {
    fn on_slot(&mut self, prep: &AlicePreparation) -> Result<()> {
        let ann = Announcement::from(prep.class);
        match &mut self.preparations {
            SymbolSink::Csv(w) => writeln!(w, "{},{}", prep.slot_index, prep.class.code().0)?,
            SymbolSink::Packed(p) => p.push(prep.class.code().0)?,
        }
        match &mut self.announcements {
            SymbolSink::Csv(w) => writeln!(
                w,
                "{},{},{}",
                prep.slot_index,
                ann.basis.map_or("-", Basis::label),
                ann.intensity.label()
            )?,
            SymbolSink::Packed(p) => p.push(ann.index() as u8)?,
        }
        Ok(())
    }

    fn on_eve(&mut self, obs: &EveObservation) -> Result<()> {
        writeln!(
            self.eve,
            "{},{},{}",
            obs.slot_index,
            obs.axis.label(),
            obs.bin_index
        )?;
        Ok(())
    }

    fn on_detection(&mut self, det: &DetectionRecord) -> Result<()> {
        writeln!(self.detections, "{},{}", det.detector, det.raw_tag)?;
        write!(
            self.truth,
            "{},{},{},{},",
            det.detector, det.raw_tag, det.true_time_ps, det.receiver_time_ps
        )?;
        match det.source_slot {
            Some(s) => writeln!(self.truth, "{s}")?,
            None => writeln!(self.truth)?,
        }
        self.rates.record(det.true_time_ps);
        Ok(())
    }
}

/// Calls `f(line_number, fields)` for every data row of a CSV log and
/// returns its run id, if present.
fn for_each_row(
    path: &Path,
    header: &str,
    mut f: impl FnMut(usize, &[&str]) -> Result<()>,
) -> Result<Option<String>> {
    let mut reader = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut line = String::new();
    let mut run_id = None;
    let mut seen_header = false;
    let mut no = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        no += 1;
        let text = line.trim_end();
        if let Some(c) = text.strip_prefix('#') {
            if let Some(id) = c.trim().strip_prefix("run_id=") {
                run_id = Some(id.to_string());
            }
            continue;
        }
        if text.is_empty() {
            continue;
        }
        if !seen_header {
            if text != header {
                return Err(Error::parse(
                    no,
                    format!("expected header `{header}`, found `{text}`"),
                ));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = text.split(',').collect();
        f(no, &fields)?;
    }
    if !seen_header {
        return Err(Error::parse(no, format!("missing header `{header}`")));
    }
    Ok(run_id)
}

fn field<T: std::str::FromStr>(no: usize, fields: &[&str], i: usize, what: &str) -> Result<T> {
    fields
        .get(i)
        .ok_or_else(|| Error::parse(no, format!("missing {what}")))?
        .trim()
        .parse()
        .map_err(|_| Error::parse(no, format!("bad {what} `{}`", fields[i])))
}

fn expect_slot(no: usize, slot: u64, expected: usize) -> Result<()> {
    if slot != expected as u64 {
        return Err(Error::parse(
            no,
            format!("slot index {slot} out of order, expected {expected}"),
        ));
    }
    Ok(())
}

fn is_packed(path: &Path) -> Result<bool> {
    let mut head = [0u8; 4];
    let mut f = File::open(path)?;
    Ok(f.read(&mut head)? == 4 && &head == MAGIC)
}

pub struct Logged<T> {
    pub run_id: Option<String>,
    pub records: Vec<T>,
}

/// Reads a preparation log, CSV or packed.
pub fn read_preparations(path: &Path) -> Result<Logged<SlotClass>> {
    if is_packed(path)? {
        let (run_id, symbols) = read_packed(&std::fs::read(path)?, KIND_PREP)?;
        let records = symbols
            .into_iter()
            .map(SlotClass::from_code)
            .collect::<Result<_>>()?;
        return Ok(Logged {
            run_id: Some(run_id),
            records,
        });
    }
    let mut records = Vec::new();
    let run_id = for_each_row(path, PREP_HEADER, |no, f| {
        let slot: u64 = field(no, f, 0, "slot_index")?;
        expect_slot(no, slot, records.len())?;
        let code: u8 = field(no, f, 1, "state_code")?;
        records.push(SlotClass::from_code(code).map_err(|e| Error::parse(no, e.to_string()))?);
        Ok(())
    })?;
    Ok(Logged { run_id, records })
}

/// Reads an announcement log, CSV or packed. Only basis and intensity exist
/// in this format.
pub fn read_announcements(path: &Path) -> Result<Logged<Announcement>> {
    if is_packed(path)? {
        let (run_id, symbols) = read_packed(&std::fs::read(path)?, KIND_ANN)?;
        let records = symbols
            .into_iter()
            .map(announcement_from_index)
            .collect::<Result<_>>()?;
        return Ok(Logged {
            run_id: Some(run_id),
            records,
        });
    }
    let mut records = Vec::new();
    let run_id = for_each_row(path, ANN_HEADER, |no, f| {
        let slot: u64 = field(no, f, 0, "slot_index")?;
        expect_slot(no, slot, records.len())?;
        let intensity: IntensityClass = field(no, f, 2, "intensity")?;
        let b = f.get(1).map(|s| s.trim()).unwrap_or("");
        let basis = if intensity == IntensityClass::Vacuum || b == "-" || b.is_empty() {
            None
        } else {
            Some(
                b.parse::<Basis>()
                    .map_err(|e| Error::parse(no, e.to_string()))?,
            )
        };
        if basis.is_none() != (intensity == IntensityClass::Vacuum) {
            return Err(Error::parse(no, "non-vacuum slot without a basis"));
        }
        records.push(Announcement { basis, intensity });
        Ok(())
    })?;
    Ok(Logged { run_id, records })
}

pub fn write_announcements(path: &Path, run_id: &str, ann: &[Announcement]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv_header(&mut w, run_id, ANN_HEADER)?;
    for (i, a) in ann.iter().enumerate() {
        writeln!(
            w,
            "{i},{},{}",
            a.basis.map_or("-", Basis::label),
            a.intensity.label()
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `(detector, raw_tag)` rows in file order.
pub fn read_detections(path: &Path) -> Result<Logged<(PolarizationState, u32)>> {
    let mut records = Vec::new();
    let run_id = for_each_row(path, DET_HEADER, |no, f| {
        let d: PolarizationState = field(no, f, 0, "detector")?;
        let tag: u32 = field(no, f, 1, "raw_tag")?;
        records.push((d, tag));
        Ok(())
    })?;
    Ok(Logged { run_id, records })
}

pub fn read_eve(path: &Path) -> Result<Logged<EveObservation>> {
    let mut records = Vec::new();
    let run_id = for_each_row(path, EVE_HEADER, |no, f| {
        records.push(EveObservation {
            slot_index: field(no, f, 0, "slot_index")?,
            axis: field::<Axis>(no, f, 1, "axis")?,
            bin_index: field(no, f, 2, "bin_index")?,
        });
        Ok(())
    })?;
    Ok(Logged { run_id, records })
}

pub fn read_truth(path: &Path) -> Result<Logged<DetectionRecord>> {
    let mut records = Vec::new();
    let run_id = for_each_row(path, TRUTH_HEADER, |no, f| {
        let source = f.get(4).map(|s| s.trim()).unwrap_or("");
        records.push(DetectionRecord {
            detector: field(no, f, 0, "detector")?,
            raw_tag: field(no, f, 1, "raw_tag")?,
            true_time_ps: field(no, f, 2, "true_time_ps")?,
            receiver_time_ps: field(no, f, 3, "receiver_time_ps")?,
            source_slot: if source.is_empty() {
                None
            } else {
                Some(field(no, f, 4, "source_slot")?)
            },
        });
        Ok(())
    })?;
    Ok(Logged { run_id, records })
}

/// One bit per line.
pub fn write_key(path: &Path, bits: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for b in bits {
        writeln!(w, "{b}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rates(path: &Path, run_id: &str, rates: &CountRateTimeline) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv_header(&mut w, run_id, "bin_start_s,rate_hz")?;
    for (i, r) in rates.rates_hz().iter().enumerate() {
        writeln!(w, "{},{}", i as f64 * rates.bin_s, r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SessionConfig;
    use crate::profile::ProfileSet;
    use crate::session::{SessionLog, SessionSimulator};

    fn simulate(dir: &Path, packed: bool) -> SessionLog {
        let cfg = SessionConfig::default();
        let profiles = ProfileSet::synthetic(1e6, 1e6);
        let sim = SessionSimulator::new(&cfg, 0.002, &profiles, &[]).unwrap();
        let mut log = SessionLog::with_eve();
        sim.run(9, &mut log).unwrap();
        let mut w = LogWriter::create(dir, "abc123", packed, 0.002, 0.001).unwrap();
        sim.run(9, &mut w).unwrap();
        w.finish().unwrap();
        log
    }

    #[test]
    fn csv_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let log = simulate(&dir, false);
        let prep = read_preparations(&dir.join(PREPARATIONS_CSV)).unwrap();
        assert_eq!(prep.run_id.as_deref(), Some("abc123"));
        let classes: Vec<SlotClass> = log.preparations.iter().map(|p| p.class).collect();
        assert_eq!(prep.records, classes);
        let ann = read_announcements(&dir.join(ANNOUNCEMENTS_CSV)).unwrap();
        let expect: Vec<Announcement> = classes.iter().map(|&c| c.into()).collect();
        assert_eq!(ann.records, expect);
        let det = read_detections(&dir.join(DETECTIONS_CSV)).unwrap();
        assert_eq!(det.records.len(), log.detections.len());
        assert_eq!(
            read_truth(&dir.join(TRUTH_CSV)).unwrap().records,
            log.detections
        );
        assert_eq!(read_eve(&dir.join(EVE_CSV)).unwrap().records, log.eve);
    }

    #[test]
    fn packed_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let log = simulate(&dir, true);
        let prep = read_preparations(&dir.join(PREPARATIONS_PACKED)).unwrap();
        let classes: Vec<SlotClass> = log.preparations.iter().map(|p| p.class).collect();
        assert_eq!(prep.records, classes);
        let ann = read_announcements(&dir.join(ANNOUNCEMENTS_PACKED)).unwrap();
        assert_eq!(ann.records.len(), classes.len());
        assert_eq!(ann.records[17], Announcement::from(classes[17]));
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let p = dir.join("p.csv");
        std::fs::write(&p, "# run_id=x\nslot_index,state_code\n0,2\n1,7\n").unwrap();
        match read_preparations(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{:?}", other.map(|l| l.records)),
        }
        std::fs::write(&p, "slot_index,state_code\n0,2\n2,1\n").unwrap();
        assert!(read_preparations(&p).is_err());
    }
}
