use serde::{Deserialize, Serialize};

/// Symbolic tokens of the toy answer language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    ThinkOpen,
    ThinkClose,
    AnsOpen,
    AnsClose,
    Sep,
    Empty,
    Eos,
    Item(usize),
}

/// Dense token-id space: seven structural tokens followed by `K` item tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    num_items: usize,
}

impl Vocab {
    pub const THINK_OPEN: usize = 0;
    pub const THINK_CLOSE: usize = 1;
    pub const ANS_OPEN: usize = 2;
    pub const ANS_CLOSE: usize = 3;
    pub const SEP: usize = 4;
    pub const EMPTY: usize = 5;
    pub const EOS: usize = 6;
    pub const NUM_STRUCTURAL: usize = 7;

    pub fn new(num_items: usize) -> Self {
        Self { num_items }
    }

    /// Vocabulary size `V = K + 7`.
    pub fn size(&self) -> usize {
        self.num_items + Self::NUM_STRUCTURAL
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Token id of `ITEM_k`.
    pub fn item(&self, k: usize) -> usize {
        debug_assert!(k < self.num_items);
        Self::NUM_STRUCTURAL + k
    }

    /// Item index of a token id, if it is an item token.
    pub fn item_index(&self, id: usize) -> Option<usize> {
        (id >= Self::NUM_STRUCTURAL && id < self.size()).then(|| id - Self::NUM_STRUCTURAL)
    }

    pub fn is_item(&self, id: usize) -> bool {
        self.item_index(id).is_some()
    }

    pub fn id(&self, token: Token) -> usize {
        match token {
            Token::ThinkOpen => Self::THINK_OPEN,
            Token::ThinkClose => Self::THINK_CLOSE,
            Token::AnsOpen => Self::ANS_OPEN,
            Token::AnsClose => Self::ANS_CLOSE,
            Token::Sep => Self::SEP,
            Token::Empty => Self::EMPTY,
            Token::Eos => Self::EOS,
            Token::Item(k) => self.item(k),
        }
    }

    pub fn token(&self, id: usize) -> Option<Token> {
        Some(match id {
            Self::THINK_OPEN => Token::ThinkOpen,
            Self::THINK_CLOSE => Token::ThinkClose,
            Self::ANS_OPEN => Token::AnsOpen,
            Self::ANS_CLOSE => Token::AnsClose,
            Self::SEP => Token::Sep,
            Self::EMPTY => Token::Empty,
            Self::EOS => Token::Eos,
            _ => Token::Item(self.item_index(id)?),
        })
    }

    /// Short human-readable name, e.g. `<think>` or `I3`.
    pub fn name(&self, id: usize) -> String {
        match self.token(id) {
            Some(Token::ThinkOpen) => "<think>".into(),
            Some(Token::ThinkClose) => "</think>".into(),
            Some(Token::AnsOpen) => "<answer>".into(),
            Some(Token::AnsClose) => "</answer>".into(),
            Some(Token::Sep) => ",".into(),
            Some(Token::Empty) => "_".into(),
            Some(Token::Eos) => "<eos>".into(),
            Some(Token::Item(k)) => format!("I{k}"),
            None => format!("?{id}"),
        }
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.name(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense() {
        let v = Vocab::new(6);
        assert_eq!(v.size(), 13);
        for id in 0..v.size() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert_eq!(v.token(13), None);
        assert_eq!(v.item_index(v.item(5)), Some(5));
        assert!(!v.is_item(Vocab::EOS));
    }
}
