use std::collections::HashMap;

use crate::error::{invalid, Result};

pub const BOS: usize = 0;
pub const PAD: usize = 1;
pub const BOS_TOKEN: &str = "<bos>";
pub const PAD_TOKEN: &str = "<pad>";

/// Bijection between token strings and ids; id 0 is BOS, id 1 is PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from the ordinary tokens; BOS and PAD are
    /// prepended.
    pub fn new<I, T>(ordinary: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut tokens = vec![BOS_TOKEN.to_string(), PAD_TOKEN.to_string()];
        tokens.extend(ordinary.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t).ok_or_else(|| invalid(format!("unknown token {t:?}")))).collect()
    }

    /// Space-joined rendering; BOS is omitted.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter(|&&i| i != BOS).map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}
