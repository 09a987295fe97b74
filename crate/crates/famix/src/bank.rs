//! Versioned persistence and sampling for style banks and prompt sets.
//!
//! Banks serialize to a canonical little-endian binary layout so identical
//! banks produce byte-identical files. Styles are stored as float32; mining
//! runs in higher precision but training consumes the float32 values.

use crate::stats::StyleStats;
use rand::Rng;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

const BANK_MAGIC: &[u8; 8] = b"FAMIXBNK";
const BANK_VERSION: u32 = 1;
/// Stored sigmas honor the same lower bound, in float32.
pub const EPSILON_SIGMA_F32: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a style bank file (bad magic)")]
    BadMagic,
    #[error("unsupported bank format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid bank kind byte {0}")]
    InvalidKind(u8),
    #[error("file truncated while reading {context}")]
    Truncated { context: String },
    #[error("{0} trailing bytes after bank payload")]
    TrailingBytes(usize),
    #[error("invalid utf-8 in {context}")]
    InvalidUtf8 { context: String },
    #[error("bank header declares {0} classes; at least one is required")]
    NoClasses(u32),
    #[error("bank header declares zero channels")]
    NoChannels,
    #[error("class {class} entry {entry}: sigma[{channel}] = {value} below minimum")]
    SigmaBelowMinimum {
        class: usize,
        entry: usize,
        channel: usize,
        value: f32,
    },
    #[error("class {class} entry {entry}: non-finite {which}[{channel}]")]
    NonFinite {
        class: usize,
        entry: usize,
        channel: usize,
        which: &'static str,
    },
    #[error("entry has {got} channels, bank expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("class id {class} outside bank with {num_classes} classes")]
    ClassOutOfRange { class: u32, num_classes: usize },
    #[error("no mined style for class {class} and fallback is set to error")]
    MissingStyle { class: u32 },
    #[error("banks disagree on {what}; cannot merge")]
    MergeMismatch { what: &'static str },
    #[error("prompt set file is empty")]
    EmptyPromptSet,
    #[error("prompt set header `{0}` is not one of RSP, RCP, NONE")]
    BadPromptVariant(String),
    #[error("duplicate prompt fragment `{0}`")]
    DuplicateFragment(String),
}

/// Whether entries are routed per class or shared by every patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankKind {
    ClassWise,
    Global,
}

impl BankKind {
    fn to_byte(self) -> u8 {
        match self {
            BankKind::ClassWise => 0,
            BankKind::Global => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, BankError> {
        match b {
            0 => Ok(BankKind::ClassWise),
            1 => Ok(BankKind::Global),
            other => Err(BankError::InvalidKind(other)),
        }
    }
}

/// One stored style: float32 statistics plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub prompt: String,
    pub source_id: String,
}

impl BankEntry {
    /// Quantizes a mined style to storage precision, re-clamping sigma.
    pub fn from_style(style: &StyleStats, prompt: &str, source_id: &str) -> Self {
        let mu = style.mu().iter().map(|&v| v as f32).collect();
        let sigma = style
            .sigma()
            .iter()
            .map(|&v| (v as f32).max(EPSILON_SIGMA_F32))
            .collect();
        Self {
            mu,
            sigma,
            prompt: prompt.to_string(),
            source_id: source_id.to_string(),
        }
    }

    pub fn style(&self) -> StyleStats {
        StyleStats::new(
            self.mu.iter().map(|&v| v as f64).collect(),
            self.sigma.iter().map(|&v| v as f64).collect(),
        )
        .expect("stored entries satisfy the style invariants")
    }
}

/// Mining provenance carried inside every bank file.
#[derive(Debug, Clone, PartialEq)]
pub struct BankMetadata {
    pub prompt_set_id: String,
    pub pin_steps: u32,
    pub pin_step_size: f64,
    pub seed: u64,
    pub patches_per_map: u32,
}

impl Default for BankMetadata {
    fn default() -> Self {
        Self {
            prompt_set_id: String::new(),
            pin_steps: 0,
            pin_step_size: 0.0,
            seed: 0,
            patches_per_map: 0,
        }
    }
}

/// What `sample_style` does when a class has no entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingStyleFallback {
    /// Report an error.
    Error,
    /// Signal the caller to leave the patch unmixed.
    SkipMixing,
}

/// Class-indexed lists of mined styles.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank {
    kind: BankKind,
    channels: usize,
    class_names: Vec<String>,
    entries: Vec<Vec<BankEntry>>,
    metadata: BankMetadata,
}

impl StyleBank {
    pub fn new_class_wise(
        channels: usize,
        class_names: Vec<String>,
        metadata: BankMetadata,
    ) -> Self {
        let k = class_names.len();
        Self {
            kind: BankKind::ClassWise,
            channels,
            class_names,
            entries: vec![Vec::new(); k],
            metadata,
        }
    }

    /// Single shared bank; every class draws from the same list.
    pub fn new_global(channels: usize, name: &str, metadata: BankMetadata) -> Self {
        Self {
            kind: BankKind::Global,
            channels,
            class_names: vec![name.to_string()],
            entries: vec![Vec::new()],
            metadata,
        }
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn metadata(&self) -> &BankMetadata {
        &self.metadata
    }

    pub fn entries(&self, class: u32) -> &[BankEntry] {
        let idx = self.route(class);
        &self.entries[idx]
    }

    pub fn total_entries(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.entries.iter().map(Vec::len).collect()
    }

    fn route(&self, class: u32) -> usize {
        match self.kind {
            BankKind::Global => 0,
            BankKind::ClassWise => class as usize,
        }
    }

    pub fn push(&mut self, class: u32, entry: BankEntry) -> Result<(), BankError> {
        if entry.mu.len() != self.channels || entry.sigma.len() != self.channels {
            return Err(BankError::ChannelMismatch {
                expected: self.channels,
                got: entry.mu.len(),
            });
        }
        let idx = self.route(class);
        if idx >= self.entries.len() {
            return Err(BankError::ClassOutOfRange {
                class,
                num_classes: self.entries.len(),
            });
        }
        for (channel, (&m, &s)) in entry.mu.iter().zip(&entry.sigma).enumerate() {
            if !m.is_finite() {
                return Err(BankError::NonFinite {
                    class: idx,
                    entry: self.entries[idx].len(),
                    channel,
                    which: "mu",
                });
            }
            if !s.is_finite() {
                return Err(BankError::NonFinite {
                    class: idx,
                    entry: self.entries[idx].len(),
                    channel,
                    which: "sigma",
                });
            }
            if s < EPSILON_SIGMA_F32 {
                return Err(BankError::SigmaBelowMinimum {
                    class: idx,
                    entry: self.entries[idx].len(),
                    channel,
                    value: s,
                });
            }
        }
        self.entries[idx].push(entry);
        Ok(())
    }

    /// Uniform draw from the class's entry list; deterministic under the
    /// caller's RNG stream.
    pub fn sample_style(
        &self,
        class: u32,
        rng: &mut impl Rng,
        fallback: MissingStyleFallback,
    ) -> Result<Option<StyleStats>, BankError> {
        let idx = self.route(class);
        if idx >= self.entries.len() {
            return Err(BankError::ClassOutOfRange {
                class,
                num_classes: self.entries.len(),
            });
        }
        let list = &self.entries[idx];
        if list.is_empty() {
            return match fallback {
                MissingStyleFallback::Error => Err(BankError::MissingStyle { class }),
                MissingStyleFallback::SkipMixing => Ok(None),
            };
        }
        let pick = rng.gen_range(0..list.len());
        Ok(Some(list[pick].style()))
    }

    /// Union of two banks over the same classes: entry lists concatenated,
    /// self's entries first. Used for mixing from source and mined styles.
    pub fn merged_with(&self, other: &StyleBank) -> Result<StyleBank, BankError> {
        if self.kind != other.kind {
            return Err(BankError::MergeMismatch { what: "kind" });
        }
        if self.channels != other.channels {
            return Err(BankError::MergeMismatch { what: "channels" });
        }
        if self.class_names.len() != other.class_names.len() {
            return Err(BankError::MergeMismatch { what: "class count" });
        }
        let mut merged = self.clone();
        merged.metadata.prompt_set_id = format!(
            "{}+{}",
            self.metadata.prompt_set_id, other.metadata.prompt_set_id
        );
        for (dst, src) in merged.entries.iter_mut().zip(&other.entries) {
            dst.extend(src.iter().cloned());
        }
        Ok(merged)
    }
}

// -- binary encoding ---------------------------------------------------------

pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn str16(&mut self, s: &str) {
        let bytes = s.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "string too long for bank format");
        self.u16(bytes.len() as u16);
        self.buf.extend_from_slice(bytes);
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], BankError> {
        if self.pos + n > self.buf.len() {
            return Err(BankError::Truncated {
                context: context.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, context: &str) -> Result<u8, BankError> {
        Ok(self.take(1, context)?[0])
    }

    pub(crate) fn u16(&mut self, context: &str) -> Result<u16, BankError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, context: &str) -> Result<u32, BankError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, context: &str) -> Result<u64, BankError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, context: &str) -> Result<f32, BankError> {
        Ok(f32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, context: &str) -> Result<f64, BankError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub(crate) fn str16(&mut self, context: &str) -> Result<String, BankError> {
        let len = self.u16(context)? as usize;
        let bytes = self.take(len, context)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| BankError::InvalidUtf8 {
            context: context.to_string(),
        })
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Canonical byte encoding of a bank; identical banks encode identically.
pub fn encode_bank(bank: &StyleBank) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(BANK_MAGIC);
    w.u32(BANK_VERSION);
    w.u8(bank.kind.to_byte());
    w.u32(bank.channels as u32);
    w.u32(bank.class_names.len() as u32);
    for name in &bank.class_names {
        w.str16(name);
    }
    w.str16(&bank.metadata.prompt_set_id);
    w.u32(bank.metadata.pin_steps);
    w.f64(bank.metadata.pin_step_size);
    w.u64(bank.metadata.seed);
    w.u32(bank.metadata.patches_per_map);
    for class_entries in &bank.entries {
        w.u32(class_entries.len() as u32);
        for e in class_entries {
            for &v in &e.mu {
                w.f32(v);
            }
            for &v in &e.sigma {
                w.f32(v);
            }
            w.str16(&e.prompt);
            w.str16(&e.source_id);
        }
    }
    w.buf
}

/// Parses and fully re-validates a bank payload.
pub fn decode_bank(bytes: &[u8]) -> Result<StyleBank, BankError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != BANK_MAGIC {
        return Err(BankError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != BANK_VERSION {
        return Err(BankError::UnsupportedVersion(version));
    }
    let kind = BankKind::from_byte(r.u8("kind")?)?;
    let channels = r.u32("channels")? as usize;
    if channels == 0 {
        return Err(BankError::NoChannels);
    }
    let num_classes = r.u32("class count")?;
    if num_classes == 0 {
        return Err(BankError::NoClasses(num_classes));
    }
    if kind == BankKind::Global && num_classes != 1 {
        return Err(BankError::MergeMismatch {
            what: "global bank must have exactly one class",
        });
    }
    let mut class_names = Vec::with_capacity(num_classes as usize);
    for i in 0..num_classes {
        class_names.push(r.str16(&format!("class name {i}"))?);
    }
    let metadata = BankMetadata {
        prompt_set_id: r.str16("prompt set id")?,
        pin_steps: r.u32("pin steps")?,
        pin_step_size: r.f64("pin step size")?,
        seed: r.u64("seed")?,
        patches_per_map: r.u32("patches per map")?,
    };
    let mut entries = Vec::with_capacity(num_classes as usize);
    for class in 0..num_classes as usize {
        let count = r.u32(&format!("class {class} entry count"))? as usize;
        let mut list = Vec::with_capacity(count);
        for entry in 0..count {
            let ctx = format!("class {class} entry {entry}");
            let mut mu = Vec::with_capacity(channels);
            for _ in 0..channels {
                mu.push(r.f32(&ctx)?);
            }
            let mut sigma = Vec::with_capacity(channels);
            for _ in 0..channels {
                sigma.push(r.f32(&ctx)?);
            }
            for (channel, &v) in mu.iter().enumerate() {
                if !v.is_finite() {
                    return Err(BankError::NonFinite {
                        class,
                        entry,
                        channel,
                        which: "mu",
                    });
                }
            }
            for (channel, &v) in sigma.iter().enumerate() {
                if !v.is_finite() {
                    return Err(BankError::NonFinite {
                        class,
                        entry,
                        channel,
                        which: "sigma",
                    });
                }
                if v < EPSILON_SIGMA_F32 {
                    return Err(BankError::SigmaBelowMinimum {
                        class,
                        entry,
                        channel,
                        value: v,
                    });
                }
            }
            let prompt = r.str16(&format!("{ctx} prompt"))?;
            let source_id = r.str16(&format!("{ctx} source id"))?;
            list.push(BankEntry {
                mu,
                sigma,
                prompt,
                source_id,
            });
        }
        entries.push(list);
    }
    if r.remaining() != 0 {
        return Err(BankError::TrailingBytes(r.remaining()));
    }
    Ok(StyleBank {
        kind,
        channels,
        class_names,
        entries,
        metadata,
    })
}

/// Writes the canonical encoding; identical banks yield byte-identical files.
pub fn save_bank(bank: &StyleBank, path: &Path) -> Result<(), BankError> {
    let bytes = encode_bank(bank);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Loads and re-validates a bank; invariants are checked on every load.
pub fn load_bank(path: &Path) -> Result<StyleBank, BankError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_bank(&bytes)
}

// -- prompt sets --------------------------------------------------------------

/// Which fragment family a prompt set carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptVariant {
    /// Meaningful style descriptions.
    Rsp,
    /// Random character strings.
    Rcp,
    /// Untagged.
    None,
}

impl PromptVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptVariant::Rsp => "RSP",
            PromptVariant::Rcp => "RCP",
            PromptVariant::None => "NONE",
        }
    }

    fn parse(s: &str) -> Result<Self, BankError> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RSP" => Ok(PromptVariant::Rsp),
            "RCP" => Ok(PromptVariant::Rcp),
            "NONE" => Ok(PromptVariant::None),
            other => Err(BankError::BadPromptVariant(other.to_string())),
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A set of unique style fragments with its variant tag.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    variant: PromptVariant,
    fragments: Vec<String>,
}

impl PromptSet {
    pub fn new(variant: PromptVariant, fragments: Vec<String>) -> Result<Self, BankError> {
        if fragments.is_empty() {
            return Err(BankError::EmptyPromptSet);
        }
        let mut seen = std::collections::HashSet::new();
        for f in &fragments {
            if !seen.insert(f.as_str()) {
                return Err(BankError::DuplicateFragment(f.clone()));
            }
        }
        Ok(Self { variant, fragments })
    }

    pub fn variant(&self) -> PromptVariant {
        self.variant
    }

    pub fn fragments(&self) -> &[String] {
        &self.fragments
    }

    pub fn cardinality(&self) -> usize {
        self.fragments.len()
    }

    /// The first `n` fragments, for prompt-set cardinality sweeps.
    pub fn truncated(&self, n: usize) -> Result<PromptSet, BankError> {
        PromptSet::new(
            self.variant,
            self.fragments.iter().take(n).cloned().collect(),
        )
    }

    /// Uniform fragment draw.
    pub fn sample<'a>(&'a self, rng: &mut impl Rng) -> &'a str {
        &self.fragments[rng.gen_range(0..self.fragments.len())]
    }
}

/// Plain UTF-8 text: a header line naming the variant, one fragment per line.
pub fn load_prompt_set(path: &Path) -> Result<PromptSet, BankError> {
    let text = fs::read_to_string(path)?;
    parse_prompt_set(&text)
}

pub fn parse_prompt_set(text: &str) -> Result<PromptSet, BankError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or(BankError::EmptyPromptSet)?;
    let variant = PromptVariant::parse(header)?;
    let fragments: Vec<String> = lines.map(str::to_string).collect();
    PromptSet::new(variant, fragments)
}

pub fn save_prompt_set(set: &PromptSet, path: &Path) -> Result<(), BankError> {
    let mut text = String::new();
    text.push_str(set.variant.as_str());
    text.push('\n');
    for f in &set.fragments {
        text.push('\n');
        text.push_str(f);
    }
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
