use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scene::SceneClip;

/// Layout of every prompt. `{count}` and each coordinate are spelled one
/// character per token; coordinates use two decimal places. Frame visual
/// tokens precede the text.
pub const PROMPT_TEMPLATE: &str = "<bos> question : there are {count} actors . \
{for each frame t: frame {t} : [ {x1} {y1} {x2} {y2} ] ... .} \
detect groups and activities . answer : activity <ACT> groups <GROUP_1> ... <GROUP_K>";

pub const ACT_TOKEN: &str = "<ACT>";

pub fn group_token(i: usize) -> String {
    format!("<GROUP_{}>", i + 1)
}

/// Base tokens: digits, coordinate punctuation and the instruction words.
pub fn default_base_tokens() -> Vec<String> {
    let mut t: Vec<String> = vec!["<bos>".into()];
    t.extend((0..10).map(|d| d.to_string()));
    t.extend([".", ":", "[", "]"].map(String::from));
    t.extend(
        ["question", "there", "are", "actors", "frame", "detect", "groups", "and", "activities", "answer", "activity"]
            .map(String::from),
    );
    t
}

/// Closed vocabulary: base tokens followed by `<ACT>` and `<GROUP_1..K>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    num_base: usize,
    k: usize,
}

impl Vocabulary {
    pub fn new(k: usize) -> Self {
        Self::with_base_tokens(default_base_tokens(), k).expect("default vocabulary")
    }

    pub fn with_base_tokens(base: Vec<String>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("at least one group token is required".into()));
        }
        let num_base = base.len();
        let mut tokens = base;
        tokens.push(ACT_TOKEN.into());
        tokens.extend((0..k).map(group_token));
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index, num_base, k })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_base(&self) -> usize {
        self.num_base
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn act_id(&self) -> usize {
        self.num_base
    }

    pub fn group_id(&self, i: usize) -> usize {
        self.num_base + 1 + i
    }

    fn require(&self, token: &str) -> Result<usize> {
        self.id(token).ok_or_else(|| Error::Config(format!("vocabulary has no token {token:?}")))
    }
}

/// Token ids of one prompt plus where the special tokens sit.
///
/// Offsets index the full decoder sequence, i.e. they already count the
/// `visual_tokens` frame embeddings that precede the text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSequence {
    pub tokens: Vec<usize>,
    pub visual_tokens: usize,
    pub act_offset: usize,
    pub group_offsets: Vec<usize>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.visual_tokens + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Builder<'v> {
    vocab: &'v Vocabulary,
    ids: Vec<usize>,
}

impl Builder<'_> {
    fn word(&mut self, w: &str) -> Result<()> {
        self.ids.push(self.vocab.require(w)?);
        Ok(())
    }

    fn words(&mut self, ws: &str) -> Result<()> {
        ws.split_whitespace().try_for_each(|w| self.word(w))
    }

    fn spell(&mut self, text: &str) -> Result<()> {
        text.chars().try_for_each(|c| self.word(c.encode_utf8(&mut [0; 4])))
    }
}

/// Textualises a clip's boxes into the question and appends the fixed answer
/// template. Deterministic in the clip.
pub fn build_prompt(clip: &SceneClip, vocab: &Vocabulary) -> Result<PromptSequence> {
    let mut b = Builder { vocab, ids: Vec::new() };
    b.words("<bos> question : there are")?;
    b.spell(&clip.actors.len().to_string())?;
    b.words("actors .")?;
    for t in 0..clip.frames {
        b.word("frame")?;
        b.spell(&t.to_string())?;
        b.word(":")?;
        for a in &clip.actors {
            let bx = a.boxes[t];
            b.word("[")?;
            for v in [bx.x1, bx.y1, bx.x2, bx.y2] {
                b.spell(&format!("{v:.2}"))?;
            }
            b.word("]")?;
        }
        b.word(".")?;
    }
    b.words("detect groups and activities . answer : activity")?;
    let v = clip.frames;
    let act_offset = v + b.ids.len();
    b.ids.push(vocab.act_id());
    b.word("groups")?;
    let mut group_offsets = Vec::with_capacity(vocab.k());
    for i in 0..vocab.k() {
        group_offsets.push(v + b.ids.len());
        b.ids.push(vocab.group_id(i));
    }
    Ok(PromptSequence { tokens: b.ids, visual_tokens: v, act_offset, group_offsets })
}
