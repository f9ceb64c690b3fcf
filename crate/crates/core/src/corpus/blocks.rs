use super::{CorpusError, Message, Vocabulary, INSEP, PAD};

/// Positions `start..end` of one message inside a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    /// Index of the message in the segmented list.
    pub message: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub token_ids: Vec<usize>,
    /// 1 for real tokens (including INSEP), 0 for PAD.
    pub attention_mask: Vec<u8>,
    pub spans: Vec<Span>,
    pub is_pad_block: bool,
}

impl Block {
    fn pad(block_size: usize) -> Self {
        Self {
            token_ids: vec![PAD; block_size],
            attention_mask: vec![0; block_size],
            spans: vec![],
            is_pad_block: true,
        }
    }

    /// Number of leading non-PAD positions.
    pub fn len_nonpad(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m == 1).count()
    }

    /// Block with the same content but `extra` PAD positions appended.
    pub fn with_padding(&self, extra: usize) -> Self {
        let mut b = self.clone();
        b.token_ids.extend(std::iter::repeat(PAD).take(extra));
        b.attention_mask.extend(std::iter::repeat(0).take(extra));
        b
    }
}

/// A user's token stream cut into fixed-size blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSequence {
    pub user_id: String,
    pub block_size: usize,
    pub blocks: Vec<Block>,
    pub num_nonpad_blocks: usize,
    pub num_messages: usize,
    /// True when content beyond the block cap was dropped.
    pub truncated: bool,
}

impl BlockSequence {
    pub fn nonpad_blocks(&self) -> impl Iterator<Item = (usize, &Block)> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_pad_block)
    }

    /// Block index and position of the last token of `message`, if it
    /// survived truncation.
    pub fn message_last_token(&self, message: usize) -> Option<(usize, usize)> {
        self.blocks.iter().enumerate().rev().find_map(|(bi, b)| {
            b.spans
                .iter()
                .find(|s| s.message == message)
                .map(|s| (bi, s.end - 1))
        })
    }

    /// Whether every token of `message` is inside the kept blocks.
    pub fn message_complete(&self, message: usize, message_len: usize) -> bool {
        let kept: usize = self
            .blocks
            .iter()
            .flat_map(|b| &b.spans)
            .filter(|s| s.message == message)
            .map(|s| s.end - s.start)
            .sum();
        kept == message_len
    }

    /// Sub-sequence holding blocks `start..end`, without further padding.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let blocks: Vec<Block> = self.blocks[start..end].to_vec();
        Self {
            user_id: self.user_id.clone(),
            block_size: self.block_size,
            num_nonpad_blocks: blocks.iter().filter(|b| !b.is_pad_block).count(),
            blocks,
            num_messages: self.num_messages,
            truncated: self.truncated,
        }
    }

    /// Number of real tokens over all blocks.
    pub fn num_tokens(&self) -> usize {
        self.blocks.iter().map(Block::len_nonpad).sum()
    }
}

/// Tokenizes `messages` with `vocab` and segments them; see
/// [`segment_token_messages`].
pub fn segment_into_blocks(
    user_id: &str,
    messages: &[Message],
    vocab: &Vocabulary,
    block_size: usize,
    max_blocks: usize,
) -> Result<BlockSequence, CorpusError> {
    let tokens: Vec<Vec<usize>> = messages.iter().map(|m| vocab.encode(&m.text)).collect();
    segment_token_messages(user_id, &tokens, block_size, Some(max_blocks))
}

/// Lays messages out one after another with a single INSEP between
/// consecutive messages and cuts the stream into `block_size` windows.
///
/// With `Some(k)`, only the earliest `k` blocks are kept and shorter
/// sequences are filled with PAD blocks up to `k`. With `None` every block
/// is kept and no PAD blocks are added. The final partial block is always
/// PAD-filled. Messages longer than a block continue in the next block.
pub fn segment_token_messages(
    user_id: &str,
    messages: &[Vec<usize>],
    block_size: usize,
    max_blocks: Option<usize>,
) -> Result<BlockSequence, CorpusError> {
    if messages.is_empty() {
        return Err(CorpusError::EmptyMessages);
    }
    if block_size < 2 {
        return Err(CorpusError::InvalidArgument(format!(
            "block_size must be >= 2, got {block_size}"
        )));
    }
    if max_blocks == Some(0) {
        return Err(CorpusError::InvalidArgument(
            "max_blocks must be >= 1".into(),
        ));
    }

    // (token, message index or None for INSEP)
    let mut stream: Vec<(usize, Option<usize>)> = Vec::new();
    for (mi, m) in messages.iter().enumerate() {
        if mi > 0 {
            stream.push((INSEP, None));
        }
        stream.extend(m.iter().map(|&t| (t, Some(mi))));
    }

    let cap = max_blocks.unwrap_or(usize::MAX);
    let mut blocks = Vec::new();
    let mut truncated = false;
    for (ci, chunk) in stream.chunks(block_size).enumerate() {
        if ci == cap {
            truncated = true;
            break;
        }
        let mut token_ids: Vec<usize> = chunk.iter().map(|(t, _)| *t).collect();
        let mut attention_mask = vec![1u8; chunk.len()];
        let mut spans: Vec<Span> = Vec::new();
        for (pos, (_, msg)) in chunk.iter().enumerate() {
            let Some(mi) = *msg else { continue };
            match spans.last_mut() {
                Some(s) if s.message == mi && s.end == pos => s.end += 1,
                _ => spans.push(Span {
                    message: mi,
                    start: pos,
                    end: pos + 1,
                }),
            }
        }
        token_ids.resize(block_size, PAD);
        attention_mask.resize(block_size, 0);
        blocks.push(Block {
            token_ids,
            attention_mask,
            spans,
            is_pad_block: false,
        });
    }
    if blocks.is_empty() {
        // every message empty: a single block holding nothing but padding
        // is still a content block of length zero, which the model cannot
        // use; report it as empty input
        return Err(CorpusError::EmptyMessages);
    }
    let num_nonpad_blocks = blocks.len();
    if let Some(k) = max_blocks {
        while blocks.len() < k {
            blocks.push(Block::pad(block_size));
        }
    }
    Ok(BlockSequence {
        user_id: user_id.to_string(),
        block_size,
        blocks,
        num_nonpad_blocks,
        num_messages: messages.len(),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "b", "c", "d", "e"])
    }

    fn msgs(texts: &[&str]) -> Vec<Message> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Message {
                timestamp: i as i64,
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn two_messages_in_one_block() {
        let v = vocab();
        let seq = segment_into_blocks("u", &msgs(&["a b c", "d e"]), &v, 8, 1).unwrap();
        let b = &seq.blocks[0];
        let expected: Vec<usize> = ["a", "b", "c"]
            .iter()
            .map(|w| v.id(w))
            .chain([INSEP])
            .chain(["d", "e"].iter().map(|w| v.id(w)))
            .chain([PAD, PAD])
            .collect();
        assert_eq!(b.token_ids, expected);
        assert_eq!(b.attention_mask, vec![1, 1, 1, 1, 1, 1, 0, 0]);
        assert_eq!(
            b.spans,
            vec![
                Span {
                    message: 0,
                    start: 0,
                    end: 3
                },
                Span {
                    message: 1,
                    start: 4,
                    end: 6
                }
            ]
        );
    }

    #[test]
    fn exact_fit_has_no_padding() {
        let seq = segment_into_blocks("u", &msgs(&["a b c d"]), &vocab(), 4, 1).unwrap();
        assert_eq!(seq.blocks.len(), 1);
        assert!(seq.blocks[0].attention_mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn long_message_straddles_blocks() {
        let seq = segment_into_blocks("u", &msgs(&["a b c d e"]), &vocab(), 2, 4).unwrap();
        assert_eq!(seq.num_nonpad_blocks, 3);
        assert_eq!(seq.blocks.len(), 4);
        assert!(seq.blocks[3].is_pad_block);
        assert_eq!(seq.message_last_token(0), Some((2, 0)));
    }

    #[test]
    fn truncation_keeps_earliest_blocks() {
        let seq = segment_into_blocks("u", &msgs(&["a b", "c d", "e a"]), &vocab(), 2, 2).unwrap();
        assert!(seq.truncated);
        assert_eq!(seq.blocks.len(), 2);
        assert_eq!(seq.blocks[0].token_ids, vec![3, 4]);
        assert!(seq.message_last_token(2).is_none());
    }

    #[test]
    fn eight_blocks_of_1024_tokens() {
        let text = vec!["a"; 5000].join(" ");
        let seq = segment_into_blocks("u", &msgs(&[&text]), &vocab(), 1024, 8).unwrap();
        assert_eq!(seq.blocks.len(), 8);
        assert!(seq.blocks.iter().all(|b| b.token_ids.len() == 1024));
        assert_eq!(seq.num_nonpad_blocks, 5);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            segment_into_blocks("u", &[], &vocab(), 8, 1),
            Err(CorpusError::EmptyMessages)
        ));
        assert!(segment_into_blocks("u", &msgs(&["a"]), &vocab(), 1, 1).is_err());
        assert!(segment_into_blocks("u", &msgs(&["a"]), &vocab(), 4, 0).is_err());
    }

    #[test]
    fn uncapped_has_no_pad_blocks() {
        let toks = vec![vec![3; 7], vec![4; 3]];
        let seq = segment_token_messages("u", &toks, 4, None).unwrap();
        assert_eq!(seq.blocks.len(), 3);
        assert_eq!(seq.num_nonpad_blocks, 3);
        assert_eq!(seq.num_tokens(), 11);
    }
}
