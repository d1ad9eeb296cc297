use super::{Conversation, Message, PromptInstance};
use crate::taskgen::TaskInstance;
use crate::vocab::{Token, ASSISTANT};

/// Splits a conversation into consecutive blocks of whole turns whose
/// serialized length fits `budget`. A turn that alone exceeds the budget is
/// dropped and starts a fresh block after it.
///
/// Each block is returned as the indices of the turns it contains.
pub fn split_blocks(conv: &Conversation, budget: usize) -> Vec<Vec<usize>> {
    let sys_len = conv.system().map_or(0, Message::serialized_len);
    let mut blocks = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = sys_len;
    for (i, (u, a)) in conv.turns().into_iter().enumerate() {
        let len = u.serialized_len() + a.serialized_len();
        if used + len > budget && !cur.is_empty() {
            blocks.push(std::mem::take(&mut cur));
            used = sys_len;
        }
        if used + len > budget {
            continue;
        }
        cur.push(i);
        used += len;
    }
    if !cur.is_empty() {
        blocks.push(cur);
    }
    blocks
}

fn serialize_prefix(conv: &Conversation, turns: &[usize], upto: usize) -> (Vec<Token>, Vec<(usize, usize)>) {
    let all = conv.turns();
    let mut out = Vec::new();
    let mut spans = Vec::new();
    if let Some(s) = conv.system() {
        s.serialize_into(&mut out);
    }
    for &t in &turns[..upto] {
        let (u, a) = all[t];
        u.serialize_into(&mut out);
        let start = out.len() + 1;
        a.serialize_into(&mut out);
        spans.push((start, out.len()));
    }
    (out, spans)
}

fn instance(conv: &Conversation, block: &[usize], pos: usize, all_assistant_turns: bool) -> Option<PromptInstance> {
    let turns = conv.turns();
    let (u, a) = turns[block[pos]];
    let task = TaskInstance::parse(&u.tokens).ok()?;
    let (mut context, history_spans) = serialize_prefix(conv, block, pos);
    u.serialize_into(&mut context);
    context.push(ASSISTANT);
    let mut response = a.tokens.clone();
    response.push(crate::vocab::EOS);
    let start = context.len();
    let mut mask_spans = if all_assistant_turns { history_spans } else { Vec::new() };
    mask_spans.push((start, start + response.len()));
    Some(PromptInstance {
        conversation_id: conv.id,
        turn_index: block[pos],
        depth: pos + 1,
        context,
        response,
        mask_spans,
        task,
    })
}

/// One prompt instance per assistant turn that fits the token budget, with
/// the loss restricted to that turn's response.
pub fn unfold(conv: &Conversation, budget: usize) -> Vec<PromptInstance> {
    split_blocks(conv, budget)
        .iter()
        .flat_map(|block| (0..block.len()).filter_map(move |p| instance(conv, block, p, false)))
        .collect()
}

pub fn unfold_all(convs: &[Conversation], budget: usize) -> Vec<PromptInstance> {
    convs.iter().flat_map(|c| unfold(c, budget)).collect()
}

/// Supervised examples: one per block, loss on every assistant response in it.
pub fn sft_examples(convs: &[Conversation], budget: usize) -> Vec<PromptInstance> {
    let mut out = Vec::new();
    for conv in convs {
        for block in split_blocks(conv, budget) {
            if let Some(inst) = instance(conv, &block, block.len() - 1, true) {
                out.push(inst);
            }
        }
    }
    out
}
