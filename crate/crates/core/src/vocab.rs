//! The fixed word/character token table shipped in `assets/vocab.txt`.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

const TABLE: &str = include_str!("../assets/vocab.txt");

/// Surface strings of the seven special tokens, in id order.
pub const SPECIAL_SURFACES: [&str; 7] = [
    "<|latent_start|>",
    "<|latent_pad|>",
    "<|latent_end|>",
    "<think>",
    "</think>",
    "<answer>",
    "</answer>",
];

/// Ids of the special tokens. All lie above the base vocabulary range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokenSet {
    pub latent_start: TokenId,
    pub latent_pad: TokenId,
    pub latent_end: TokenId,
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub answer_open: TokenId,
    pub answer_close: TokenId,
}

impl SpecialTokenSet {
    /// Specials appended after a base vocabulary of `base_size` tokens.
    pub fn after_base(base_size: usize) -> Self {
        Self {
            latent_start: base_size,
            latent_pad: base_size + 1,
            latent_end: base_size + 2,
            think_open: base_size + 3,
            think_close: base_size + 4,
            answer_open: base_size + 5,
            answer_close: base_size + 6,
        }
    }

    pub fn all(&self) -> [TokenId; 7] {
        [
            self.latent_start,
            self.latent_pad,
            self.latent_end,
            self.think_open,
            self.think_close,
            self.answer_open,
            self.answer_close,
        ]
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        self.all().contains(&t)
    }

    pub fn is_latent(&self, t: TokenId) -> bool {
        t == self.latent_start || t == self.latent_pad || t == self.latent_end
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    surfaces: Vec<String>,
    lookup: HashMap<String, TokenId>,
    base_size: usize,
    specials: SpecialTokenSet,
    version: u32,
}

impl Vocab {
    /// The table compiled into the crate.
    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| Vocab::parse(TABLE).expect("bundled token table is valid"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut base = Vec::new();
        let mut special = Vec::new();
        let mut section = None;
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# version") {
                version = rest.trim().parse().ok();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[base]" => section = Some(&mut base),
                "[special]" => section = Some(&mut special),
                word => match section.as_mut() {
                    Some(list) => list.push(word.to_string()),
                    None => return Err(Error::Vocab(format!("token {word:?} outside a section"))),
                },
            }
        }
        let version = version.ok_or_else(|| Error::Vocab("missing version line".into()))?;
        if special != SPECIAL_SURFACES {
            return Err(Error::Vocab(format!(
                "special section must list {SPECIAL_SURFACES:?} in order"
            )));
        }
        let base_size = base.len();
        let mut surfaces = base;
        surfaces.extend(special);
        let mut lookup = HashMap::new();
        for (i, s) in surfaces.iter().enumerate() {
            if lookup.insert(s.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {s:?}")));
            }
        }
        Ok(Self {
            surfaces,
            lookup,
            base_size,
            specials: SpecialTokenSet::after_base(base_size),
            version,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn specials(&self) -> SpecialTokenSet {
        self.specials
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.lookup.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        self.surfaces.get(id).map_or("<?>", String::as_str)
    }

    /// Whitespace tokenization with per-character fallback.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                out.push(id);
                continue;
            }
            for ch in word.chars() {
                let mut buf = [0u8; 4];
                let id = self
                    .id(ch.encode_utf8(&mut buf))
                    .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
                out.push(id);
            }
        }
        Ok(out)
    }

    fn is_numeric_piece(&self, id: TokenId) -> bool {
        let s = self.surface(id);
        s == "." || (s.len() == 1 && s.as_bytes()[0].is_ascii_digit())
    }

    /// Joins surfaces with spaces, gluing runs of digits and `.` back into
    /// numbers.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev_numeric = false;
        for &id in ids {
            let numeric = self.is_numeric_piece(id);
            if !out.is_empty() && !(numeric && prev_numeric) {
                out.push(' ');
            }
            out.push_str(self.surface(id));
            prev_numeric = numeric;
        }
        out
    }
}
