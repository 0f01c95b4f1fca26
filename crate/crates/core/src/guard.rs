//! Secret-file tripwire for the ledger file.
//!
//! A byte-wise linear automaton over GF(2) runs across the whole ledger file,
//! alternating between two companion matrices, and leaves a rolling window of
//! states as the signature. The signature is stored in a file named after its
//! own first bytes. Before every append the signature is recomputed and
//! compared with the stored one; any difference raises an alarm and blocks the
//! append.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{format_ms, Clock, Millis};
use crate::ledger::{Chain, LedgerError, LedgerRow, LedgerStore};

pub const DEFAULT_SIGN_LEN: usize = 257;
pub const DEFAULT_NAME_LEN: usize = 16;

/// Coefficient strings (x^8 first) of the two primitive polynomials.
pub const STANDARD_POLYNOMIALS: [&str; 2] = ["100011101", "110101011"];

/// 8×8 matrix over GF(2); `rows[i]` bit `7 - j` is entry `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GuardMatrix {
    pub rows: [u8; 8],
}

impl GuardMatrix {
    pub const IDENTITY: GuardMatrix = GuardMatrix {
        rows: [0x80, 0x40, 0x20, 0x10, 0x08, 0x04, 0x02, 0x01],
    };

    /// Companion matrix of `x^8 + c7 x^7 + … + c0`, given as the nine
    /// coefficients from x^8 down to x^0. Rows 0..6 form the superdiagonal;
    /// row 7 packs `c0 … c7` with `c0` in the top bit.
    pub fn companion(coefficients: &str) -> Result<Self, GuardError> {
        let bits: Vec<u8> = coefficients
            .bytes()
            .map(|c| match c {
                b'0' => Ok(0),
                b'1' => Ok(1),
                _ => Err(GuardError::BadParameters(format!(
                    "coefficient string {coefficients:?} must be binary"
                ))),
            })
            .collect::<Result<_, _>>()?;
        if bits.len() != 9 || bits[0] != 1 {
            return Err(GuardError::BadParameters(
                "need a monic degree-8 polynomial: nine digits starting with 1".into(),
            ));
        }
        let mut rows = [0u8; 8];
        for (i, row) in rows.iter_mut().take(7).enumerate() {
            *row = 1 << (6 - i);
        }
        // bits[8] is c0, bits[1] is c7.
        for k in 0..8 {
            rows[7] |= bits[8 - k] << (7 - k);
        }
        Ok(Self { rows })
    }

    pub fn standard() -> [GuardMatrix; 2] {
        STANDARD_POLYNOMIALS.map(|p| Self::companion(p).expect("valid constant polynomial"))
    }

    /// `state · M` for every state, so a step is one lookup and one XOR.
    pub fn table(&self) -> [u8; 256] {
        let mut t = [0u8; 256];
        for (s, out) in t.iter_mut().enumerate() {
            *out = one_step(self, s as u8, 0);
        }
        t
    }

    /// Gaussian elimination rank over GF(2).
    pub fn rank(&self) -> u32 {
        let mut rows = self.rows;
        let mut rank = 0;
        for bit in (0..8).rev() {
            let mask = 1u8 << bit;
            if let Some(p) = (rank as usize..8).find(|&r| rows[r] & mask != 0) {
                rows.swap(rank as usize, p);
                for r in 0..8 {
                    if r != rank as usize && rows[r] & mask != 0 {
                        rows[r] ^= rows[rank as usize];
                    }
                }
                rank += 1;
            }
        }
        rank
    }
}

/// One automaton step: XOR of the rows selected by the state bits (state bit
/// `i` is bit `7 - i`), then XOR the input byte.
pub fn one_step(matr: &GuardMatrix, state: u8, byte: u8) -> u8 {
    let mut out = 0u8;
    for (i, row) in matr.rows.iter().enumerate() {
        if state & (0x80 >> i) != 0 {
            out ^= row;
        }
    }
    out ^ byte
}

/// Lowercase hex of the first `name_len` bytes.
pub fn derive_filename(sig_bytes: &[u8], name_len: usize) -> String {
    hex::encode(&sig_bytes[..name_len.min(sig_bytes.len())])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardConfig {
    pub sign_len: usize,
    pub name_len: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            sign_len: DEFAULT_SIGN_LEN,
            name_len: DEFAULT_NAME_LEN,
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> Result<(), GuardError> {
        if self.sign_len.is_multiple_of(2) {
            return Err(GuardError::BadParameters(format!(
                "sign_len {} must be odd",
                self.sign_len
            )));
        }
        if self.name_len == 0 || self.name_len >= self.sign_len {
            return Err(GuardError::BadParameters(format!(
                "name_len {} must be in 1..{}",
                self.name_len, self.sign_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct GuardSignature {
    pub sign_len: usize,
    pub name_len: usize,
    pub bytes: Vec<u8>,
    pub filename: String,
}

impl fmt::Debug for GuardSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GuardSignature({})", self.filename)
    }
}

impl GuardSignature {
    fn from_bytes(bytes: Vec<u8>, config: GuardConfig) -> Self {
        let filename = derive_filename(&bytes, config.name_len);
        Self {
            sign_len: config.sign_len,
            name_len: config.name_len,
            bytes,
            filename,
        }
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }
}

/// Incremental form of the signature computation.
pub struct SignatureState {
    tables: [[u8; 256]; 2],
    config: GuardConfig,
    bytes: Vec<u8>,
    state: u8,
    pos: usize,
    matr: usize,
}

impl SignatureState {
    pub fn new(config: GuardConfig) -> Result<Self, GuardError> {
        config.validate()?;
        let [a, b] = GuardMatrix::standard();
        Ok(Self {
            tables: [a.table(), b.table()],
            config,
            bytes: vec![0; config.sign_len],
            state: 0,
            pos: 0,
            matr: 0,
        })
    }

    pub fn update(&mut self, data: &[u8]) {
        let len = self.config.sign_len;
        for &byte in data {
            self.state = self.tables[self.matr][self.state as usize] ^ byte;
            self.matr ^= 1;
            self.bytes[self.pos] = self.state;
            self.pos += 1;
            if self.pos == len {
                self.pos = 0;
            }
        }
    }

    pub fn finish(self) -> GuardSignature {
        GuardSignature::from_bytes(self.bytes, self.config)
    }
}

pub fn compute_signature(
    mut stream: impl Read,
    sign_len: usize,
    name_len: usize,
) -> Result<GuardSignature, GuardError> {
    let mut st = SignatureState::new(GuardConfig { sign_len, name_len })?;
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        st.update(&buf[..n]);
    }
    Ok(st.finish())
}

/// Signature of a file; a missing file hashes as empty.
pub fn signature_of_file(path: &Path, config: GuardConfig) -> Result<GuardSignature, GuardError> {
    match fs::File::open(path) {
        Ok(f) => compute_signature(f, config.sign_len, config.name_len),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            compute_signature(io::empty(), config.sign_len, config.name_len)
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alarm {
    pub at: Millis,
    /// Hex of the stored signature, if a secret file was found.
    pub expected: Option<String>,
    pub computed: String,
    pub reason: String,
}

impl fmt::Display for Alarm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "integrity alarm: {}", self.reason)
    }
}

#[derive(Debug, Error)]
pub enum GuardError {
    #[error("bad guard parameters: {0}")]
    BadParameters(String),
    #[error("{0}")]
    Alarm(Box<Alarm>),
    #[error("no secret file in the guard directory for a non-empty ledger")]
    MissingSecretFile,
    #[error("append rejected: {0}")]
    AppendRejected(#[source] LedgerError),
    #[error("guard i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckOutcome {
    /// The ledger file matches the stored signature.
    Intact(GuardSignature),
    /// Empty ledger and no secret file yet.
    Uninitialized,
}

#[derive(Clone, Debug)]
pub struct AppendOutcome {
    pub row: LedgerRow,
    pub signature: GuardSignature,
    pub bootstrap: bool,
    pub removed: Option<PathBuf>,
}

/// Owns one guard directory and its alarm log.
pub struct Guard {
    dir: PathBuf,
    audit_log: PathBuf,
    config: GuardConfig,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Guard")
            .field("dir", &self.dir)
            .field("config", &self.config)
            .finish()
    }
}

impl Guard {
    pub fn new(
        dir: impl Into<PathBuf>,
        audit_log: impl Into<PathBuf>,
        config: GuardConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, GuardError> {
        config.validate()?;
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            audit_log: audit_log.into(),
            config,
            clock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> GuardConfig {
        self.config
    }

    pub fn audit_log(&self) -> &Path {
        &self.audit_log
    }

    fn is_secret_name(&self, name: &str) -> bool {
        name.len() == 2 * self.config.name_len
            && name
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
    }

    /// Secret files currently present, sorted by name.
    pub fn secret_files(&self) -> Result<Vec<PathBuf>, GuardError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file()
                && entry
                    .file_name()
                    .to_str()
                    .is_some_and(|n| self.is_secret_name(n))
            {
                out.push(entry.path());
            }
        }
        out.sort();
        Ok(out)
    }

    fn alarm(
        &self,
        expected: Option<String>,
        computed: &GuardSignature,
        reason: String,
    ) -> GuardError {
        let alarm = Alarm {
            at: self.clock.now_ms(),
            expected,
            computed: computed.to_hex(),
            reason,
        };
        if let Err(e) = self.record_alarm(&alarm) {
            tracing::error!(error = %e, "could not write the alarm log");
        }
        tracing::warn!(reason = %alarm.reason, "guard alarm");
        GuardError::Alarm(Box::new(alarm))
    }

    fn record_alarm(&self, alarm: &Alarm) -> io::Result<()> {
        if let Some(dir) = self.audit_log.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.audit_log)?;
        writeln!(
            f,
            "{}\t{}\tALARM\texpected={}\tcomputed={}\t{}",
            format_ms(alarm.at),
            alarm.at,
            alarm.expected.as_deref().unwrap_or("none"),
            alarm.computed,
            alarm.reason
        )
    }

    /// Step 1 of an append: recompute and compare.
    pub fn check(&self, ledger_path: &Path) -> Result<CheckOutcome, GuardError> {
        let computed = signature_of_file(ledger_path, self.config)?;
        let files = self.secret_files()?;
        let ledger_empty = fs::metadata(ledger_path)
            .map(|m| m.len() == 0)
            .unwrap_or(true);
        let stored_path = match files.as_slice() {
            [] if ledger_empty => return Ok(CheckOutcome::Uninitialized),
            [] => return Err(GuardError::MissingSecretFile),
            [one] => one,
            many => {
                return Err(self.alarm(
                    None,
                    &computed,
                    format!("{} secret files present, expected one", many.len()),
                ))
            }
        };
        let stored = fs::read(stored_path)?;
        let stored_name = stored_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if stored != computed.bytes {
            return Err(self.alarm(
                Some(hex::encode(&stored)),
                &computed,
                "ledger file does not match the stored signature".into(),
            ));
        }
        if stored_name != computed.filename {
            return Err(self.alarm(
                Some(hex::encode(&stored)),
                &computed,
                format!("secret file {stored_name} is not named after its contents"),
            ));
        }
        Ok(CheckOutcome::Intact(computed))
    }

    /// Check, append one row built by `build`, then replace the secret file.
    ///
    /// `build` sees the chain as re-read from the verified file. On an alarm
    /// or a rejected row neither the ledger nor the secret file changes.
    pub fn guarded_append<F>(
        &self,
        store: &mut LedgerStore,
        build: F,
    ) -> Result<AppendOutcome, GuardError>
    where
        F: FnOnce(&Chain) -> Result<LedgerRow, LedgerError>,
    {
        let outcome = self.check(store.path())?;
        let bootstrap = outcome == CheckOutcome::Uninitialized;
        store.reload().map_err(GuardError::AppendRejected)?;
        let row = build(store.chain()).map_err(GuardError::AppendRejected)?;
        if bootstrap && row.index != 0 {
            return Err(GuardError::MissingSecretFile);
        }
        store
            .append_row(row.clone())
            .map_err(GuardError::AppendRejected)?;

        let removed = match outcome {
            CheckOutcome::Intact(old) => {
                let path = self.dir.join(&old.filename);
                fs::remove_file(&path)?;
                Some(path)
            }
            CheckOutcome::Uninitialized => None,
        };
        let signature = signature_of_file(store.path(), self.config)?;
        self.write_secret(&signature)?;
        Ok(AppendOutcome {
            row,
            signature,
            bootstrap,
            removed,
        })
    }

    fn write_secret(&self, sig: &GuardSignature) -> Result<(), GuardError> {
        let tmp = self.dir.join(".pending");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&sig.bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(&sig.filename))?;
        Ok(())
    }

    /// Copies the current secret file into `dest_dir`.
    pub fn export(&self, dest_dir: &Path) -> Result<PathBuf, GuardError> {
        let files = self.secret_files()?;
        let src = match files.as_slice() {
            [one] => one,
            [] => return Err(GuardError::MissingSecretFile),
            many => {
                return Err(GuardError::BadParameters(format!(
                    "{} secret files present",
                    many.len()
                )))
            }
        };
        fs::create_dir_all(dest_dir)?;
        let dest = dest_dir.join(src.file_name().expect("secret file has a name"));
        fs::copy(src, &dest)?;
        Ok(dest)
    }

    /// Installs a secret file received from elsewhere, replacing any present.
    /// The file must be consistent with its own name.
    pub fn import(&self, src: &Path) -> Result<GuardSignature, GuardError> {
        let bytes = fs::read(src)?;
        if bytes.len() != self.config.sign_len {
            return Err(GuardError::BadParameters(format!(
                "secret file holds {} bytes, expected {}",
                bytes.len(),
                self.config.sign_len
            )));
        }
        let sig = GuardSignature::from_bytes(bytes, self.config);
        let name = src.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name != sig.filename {
            return Err(GuardError::BadParameters(format!(
                "file name {name} does not match its contents ({})",
                sig.filename
            )));
        }
        for old in self.secret_files()? {
            fs::remove_file(old)?;
        }
        self.write_secret(&sig)?;
        Ok(sig)
    }
}
