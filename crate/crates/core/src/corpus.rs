//! Chat-format corpus ingestion, chat-template rendering with per-token
//! provenance, and dataset length statistics.
//!
//! Every token produced by [`apply_chat_template`] carries a [`SegmentRole`]:
//! structural markers (BOS, role tags) are `Template`, system and user content
//! is `Instruction`, and assistant content plus the EOS closing each assistant
//! turn is `Completion`. The loss masks in [`crate::masking`] are pure
//! functions of these roles.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExample {
    pub id: String,
    pub messages: Vec<ChatMessage>,
}

impl ChatExample {
    pub fn new(id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            id: id.into(),
            messages,
        }
    }

    /// Checks the load-time invariants: non-blank contents, at least one
    /// assistant turn, and no two assistant turns back to back.
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidExample {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.messages.iter().any(|m| m.content.trim().is_empty()) {
            return Err(invalid("message content is empty"));
        }
        if !self.messages.iter().any(|m| m.role == Role::Assistant) {
            return Err(invalid("no assistant message"));
        }
        let consecutive = self
            .messages
            .windows(2)
            .any(|w| w[0].role == Role::Assistant && w[1].role == Role::Assistant);
        if consecutive {
            return Err(invalid("consecutive assistant messages"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentRole {
    Template,
    Instruction,
    Completion,
}

impl SegmentRole {
    pub fn as_char(self) -> char {
        match self {
            SegmentRole::Template => 'T',
            SegmentRole::Instruction => 'I',
            SegmentRole::Completion => 'C',
        }
    }
}

/// Byte-level vocabulary: ids `0..256` are raw bytes, followed by five
/// reserved template markers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub const BYTE_COUNT: u32 = 256;
    pub const BOS: TokenId = 256;
    pub const EOS: TokenId = 257;
    pub const USER_TAG: TokenId = 258;
    pub const ASSISTANT_TAG: TokenId = 259;
    pub const SYSTEM_TAG: TokenId = 260;
    pub const SIZE: usize = 261;

    pub fn new() -> Self {
        Vocabulary
    }

    pub fn size(&self) -> usize {
        Self::SIZE
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= Self::BYTE_COUNT
    }

    /// Encodes raw content text. Never emits a special id, even when the text
    /// spells out a marker such as `<|user|>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    pub fn role_tag(&self, role: Role) -> TokenId {
        match role {
            Role::System => Self::SYSTEM_TAG,
            Role::User => Self::USER_TAG,
            Role::Assistant => Self::ASSISTANT_TAG,
        }
    }

    pub fn special_text(&self, id: TokenId) -> Option<&'static str> {
        match id {
            Self::BOS => Some("<s>"),
            Self::EOS => Some("</s>"),
            Self::USER_TAG => Some("<|user|>"),
            Self::ASSISTANT_TAG => Some("<|assistant|>"),
            Self::SYSTEM_TAG => Some("<|system|>"),
            _ => None,
        }
    }

    /// Inverse of template rendering: bytes are concatenated and special ids
    /// are replaced by their textual markers. Ids outside the vocabulary are
    /// dropped.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let mut bytes = Vec::with_capacity(tokens.len());
        for &id in tokens {
            if id < Self::BYTE_COUNT {
                bytes.push(id as u8);
            } else if let Some(text) = self.special_text(id) {
                bytes.extend_from_slice(text.as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub tokens: Vec<TokenId>,
    pub roles: Vec<SegmentRole>,
    pub source_id: String,
}

impl TokenizedExample {
    pub fn new(tokens: Vec<TokenId>, roles: Vec<SegmentRole>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if tokens.len() != roles.len() {
            return Err(Error::Shape(format!(
                "{source_id}: {} tokens but {} roles",
                tokens.len(),
                roles.len()
            )));
        }
        if tokens.len() < 2 {
            return Err(Error::InvalidExample {
                id: source_id,
                reason: "fewer than two tokens".into(),
            });
        }
        Ok(Self {
            tokens,
            roles,
            source_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn count_role(&self, role: SegmentRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn has_completion(&self) -> bool {
        self.roles.contains(&SegmentRole::Completion)
    }

    pub fn role_string(&self) -> String {
        self.roles.iter().map(|r| r.as_char()).collect()
    }

    /// Right-truncates to `max_len` tokens. Returns `None` when the result has
    /// no completion token left (or is shorter than two tokens).
    pub fn truncated(mut self, max_len: usize) -> Option<Self> {
        if self.tokens.len() > max_len {
            self.tokens.truncate(max_len);
            self.roles.truncate(max_len);
        }
        (self.tokens.len() >= 2 && self.has_completion()).then_some(self)
    }

    /// Splits at the last assistant tag: the prompt runs up to and including
    /// the tag, the reference is the completion content that follows it with
    /// the terminating EOS removed.
    pub fn generation_split(&self) -> Option<(&[TokenId], Vec<TokenId>)> {
        let tag = self.tokens.iter().rposition(|&t| t == Vocabulary::ASSISTANT_TAG)?;
        let prompt = &self.tokens[..=tag];
        let reference: Vec<TokenId> = self.tokens[tag + 1..]
            .iter()
            .zip(&self.roles[tag + 1..])
            .filter(|(&t, &r)| r == SegmentRole::Completion && t != Vocabulary::EOS)
            .map(|(&t, _)| t)
            .collect();
        Some((prompt, reference))
    }
}

/// Examples parsed from a corpus file together with the number of lines that
/// were rejected.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub examples: Vec<ChatExample>,
    pub skipped: usize,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    messages: Vec<ChatMessage>,
}

/// Parses one corpus line. `line_no` is 1-based and becomes the id when the
/// record has none.
pub fn parse_line(line: &str, line_no: usize) -> Result<ChatExample> {
    let raw: RawRecord = serde_json::from_str(line)?;
    let example = ChatExample {
        id: raw.id.unwrap_or_else(|| line_no.to_string()),
        messages: raw.messages,
    };
    example.validate()?;
    Ok(example)
}

pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<LoadedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (idx, line) in text.lines().enumerate() {
        if limit.is_some_and(|n| examples.len() >= n) {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, idx + 1) {
            Ok(example) => examples.push(example),
            Err(err) => {
                warn!("{}:{}: skipping malformed record: {err}", path.display(), idx + 1);
                skipped += 1;
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::NoExamples {
            path: path.to_path_buf(),
            skipped,
        });
    }
    Ok(LoadedDataset { examples, skipped })
}

pub fn write_dataset(path: &Path, examples: &[ChatExample]) -> Result<()> {
    let mut out = Vec::new();
    for example in examples {
        serde_json::to_writer(&mut out, example)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// The textual form of the built-in chat template.
pub fn render(example: &ChatExample) -> String {
    let vocab = Vocabulary;
    let text = |id| vocab.special_text(id).unwrap_or_default();
    let mut out = String::from(text(Vocabulary::BOS));
    for message in &example.messages {
        out.push_str(text(vocab.role_tag(message.role)));
        out.push_str(&message.content);
        if message.role == Role::Assistant {
            out.push_str(text(Vocabulary::EOS));
        }
    }
    out
}

/// Renders `example` through the chat template, labelling each token with
/// the segment it came from.
pub fn apply_chat_template(example: &ChatExample, vocab: &Vocabulary) -> TokenizedExample {
    let mut tokens = vec![Vocabulary::BOS];
    let mut roles = vec![SegmentRole::Template];
    for message in &example.messages {
        tokens.push(vocab.role_tag(message.role));
        roles.push(SegmentRole::Template);
        let content = vocab.encode(&message.content);
        let role = match message.role {
            Role::System | Role::User => SegmentRole::Instruction,
            Role::Assistant => SegmentRole::Completion,
        };
        roles.extend(std::iter::repeat_n(role, content.len()));
        tokens.extend(content);
        if message.role == Role::Assistant {
            tokens.push(Vocabulary::EOS);
            roles.push(SegmentRole::Completion);
        }
    }
    TokenizedExample {
        tokens,
        roles,
        source_id: example.id.clone(),
    }
}

/// Tokenizes a corpus, right-truncating to `max_seq_len` and dropping (with
/// a warning) examples left without completion tokens. Input order is kept.
pub fn tokenize_corpus(examples: &[ChatExample], vocab: &Vocabulary, max_seq_len: usize) -> Vec<TokenizedExample> {
    examples
        .iter()
        .filter_map(|example| {
            let tokenized = apply_chat_template(example, vocab);
            let kept = tokenized.truncated(max_seq_len);
            if kept.is_none() {
                warn!("dropping `{}`: no completion tokens within {max_seq_len} tokens", example.id);
            }
            kept
        })
        .collect()
}

/// Length statistics in the layout of the usual instruction-dataset summary
/// tables. Template tokens are excluded; assistant EOS counts as output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub size: usize,
    pub avg_total_len: f64,
    pub avg_instruction_len: f64,
    pub instruction_len_std: f64,
    pub avg_output_len: f64,
    pub output_len_std: f64,
    pub ratio_out_over_instr: Option<f64>,
    pub ratio_instr_over_out: Option<f64>,
}

impl DatasetStats {
    pub fn from_moments(size: usize, avg_instruction_len: f64, instruction_len_std: f64, avg_output_len: f64, output_len_std: f64) -> Self {
        let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
        Self {
            size,
            avg_total_len: avg_instruction_len + avg_output_len,
            avg_instruction_len,
            instruction_len_std,
            avg_output_len,
            output_len_std,
            ratio_out_over_instr: ratio(avg_output_len, avg_instruction_len),
            ratio_instr_over_out: ratio(avg_instruction_len, avg_output_len),
        }
    }

    pub const CSV_HEADER: &'static str =
        "dataset,size,total,output,output_std,instruction,instruction_std,output_over_instruction,instruction_over_output";

    pub fn csv_row(&self, dataset: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "{dataset},{},{:.2},{:.2},{:.2},{:.2},{:.2},{},{}",
            self.size,
            self.avg_total_len,
            self.avg_output_len,
            self.output_len_std,
            self.avg_instruction_len,
            self.instruction_len_std,
            opt(self.ratio_out_over_instr),
            opt(self.ratio_instr_over_out),
        )
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "size={} instruction={:.2}±{:.2} output={:.2}±{:.2}",
            self.size, self.avg_instruction_len, self.instruction_len_std, self.avg_output_len, self.output_len_std
        )
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn dataset_stats(examples: &[TokenizedExample]) -> Result<DatasetStats> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let instr: Vec<f64> = examples.iter().map(|e| e.count_role(SegmentRole::Instruction) as f64).collect();
    let out: Vec<f64> = examples.iter().map(|e| e.count_role(SegmentRole::Completion) as f64).collect();
    let (instr_mean, instr_std) = mean_and_std(&instr);
    let (out_mean, out_std) = mean_and_std(&out);
    Ok(DatasetStats::from_moments(examples.len(), instr_mean, instr_std, out_mean, out_std))
}
