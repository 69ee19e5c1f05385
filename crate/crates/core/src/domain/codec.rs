//! Text codec for the switcher prompt.
//!
//! Grammar (single ASCII spaces between elements):
//!
//! ```text
//! prompt  := instruction (" " segment)* " " closing
//! segment := "<model i begins>" " " text " " "<model i ends>"
//! closing := "Which model should generate the next segment? Please respond
//!             with a number from 0 to {n-1}. The answer is model "
//! ```
//!
//! Generated text never contains a delimiter because [`sanitize_segment`]
//! deletes them before a segment joins a trace; that keeps the grammar
//! unambiguous and lets [`parse_attributed_trace`] invert the renderer.

use std::sync::OnceLock;

use regex::Regex;

use super::{Query, Segment, Trace};

/// Largest pool whose labels are all single decimal digits.
pub const MAX_POOL_SIZE: usize = 10;

/// Cue after which the switcher emits a model label.
pub const ANSWER_CUE: &str = "The answer is model ";

/// Opening of the closing question; the label range follows it.
pub const CLOSING_QUESTION: &str =
    "Which model should generate the next segment? Please respond with a number from 0 to";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("pool size {0} outside [1, {MAX_POOL_SIZE}]")]
    PoolSize(usize),
    #[error("segment {position} attributed to model {model_index}, but the pool has {n} members")]
    Attribution {
        position: usize,
        model_index: usize,
        n: usize,
    },
    #[error("instruction contains a model delimiter at byte {0}")]
    DelimiterInInstruction(usize),
    #[error("malformed trace at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("{counts} token counts supplied for {segments} segments")]
    CountMismatch { counts: usize, segments: usize },
}

fn delimiter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<model ([0-9]) (begins|ends)>").expect("static regex"))
}

fn begin_marker(i: usize) -> String {
    format!("<model {i} begins>")
}

fn end_marker(i: usize) -> String {
    format!("<model {i} ends>")
}

fn closing(n: usize) -> String {
    format!("{CLOSING_QUESTION} {}. {ANSWER_CUE}", n - 1)
}

fn check_pool_size(n: usize) -> Result<(), CodecError> {
    if (1..=MAX_POOL_SIZE).contains(&n) {
        Ok(())
    } else {
        Err(CodecError::PoolSize(n))
    }
}

/// True when `text` holds no `<model D begins>` / `<model D ends>` marker.
pub fn is_delimiter_free(text: &str) -> bool {
    !delimiter_re().is_match(text)
}

/// Deletes every delimiter marker from generated text, repeating until no
/// marker remains (a deletion can splice a new marker together).
pub fn sanitize_segment(text: &str) -> String {
    let re = delimiter_re();
    let mut out = text.to_owned();
    while re.is_match(&out) {
        let removed = re.matches_count(&out);
        out = re.replace_all(&out, "").into_owned();
        tracing::debug!(removed, "deleted delimiter markers from generated text");
    }
    out
}

trait MatchesCount {
    fn matches_count(&self, s: &str) -> usize;
}

impl MatchesCount for Regex {
    fn matches_count(&self, s: &str) -> usize {
        self.find_iter(s).count()
    }
}

/// Renders the candidate-marked switcher prompt for a pool of `n` models.
pub fn render_switcher_prompt(
    query: &Query,
    trace: &Trace,
    n: usize,
) -> Result<String, CodecError> {
    check_pool_size(n)?;
    if let Some(m) = delimiter_re().find(&query.instruction) {
        return Err(CodecError::DelimiterInInstruction(m.start()));
    }
    let mut out = String::with_capacity(
        query.instruction.len()
            + trace
                .segments()
                .iter()
                .map(|s| s.text.len() + 40)
                .sum::<usize>()
            + 120,
    );
    out.push_str(&query.instruction);
    for (position, seg) in trace.segments().iter().enumerate() {
        if seg.model_index >= n {
            return Err(CodecError::Attribution {
                position,
                model_index: seg.model_index,
                n,
            });
        }
        out.push(' ');
        out.push_str(&begin_marker(seg.model_index));
        out.push(' ');
        out.push_str(&seg.text);
        out.push(' ');
        out.push_str(&end_marker(seg.model_index));
    }
    out.push(' ');
    out.push_str(&closing(n));
    Ok(out)
}

/// Inverts [`render_switcher_prompt`]. Token counts are not part of the
/// prompt and come back as 0; see [`restore_token_counts`].
pub fn parse_attributed_trace(prompt: &str, n: usize) -> Result<(String, Trace), CodecError> {
    check_pool_size(n)?;
    let tail = format!(" {}", closing(n));
    let body = prompt
        .strip_suffix(tail.as_str())
        .ok_or_else(|| CodecError::Malformed {
            offset: prompt.len().saturating_sub(tail.len()),
            reason: format!("prompt does not end with the closing question for n={n}"),
        })?;

    let markers: Vec<_> = delimiter_re().captures_iter(body).collect();
    if markers.is_empty() {
        return Ok((body.to_owned(), Trace::new()));
    }

    let malformed = |offset: usize, reason: &str| CodecError::Malformed {
        offset,
        reason: reason.to_owned(),
    };

    let first = markers[0].get(0).expect("group 0").start();
    if first == 0 || &body[first - 1..first] != " " {
        return Err(malformed(
            first,
            "expected a single space before the first segment",
        ));
    }
    let instruction = body[..first - 1].to_owned();

    let mut segments = Vec::with_capacity(markers.len() / 2);
    let mut cursor = first;
    let mut iter = markers.iter();
    while let Some(open) = iter.next() {
        let whole = open.get(0).expect("group 0");
        if whole.start() != cursor {
            return Err(malformed(cursor, "unexpected text between segments"));
        }
        if &open[2] != "begins" {
            return Err(malformed(
                whole.start(),
                "end marker without a matching begin",
            ));
        }
        let model_index: usize = open[1].parse().expect("digit");
        if model_index >= n {
            return Err(CodecError::Attribution {
                position: segments.len(),
                model_index,
                n,
            });
        }
        let close = iter
            .next()
            .ok_or_else(|| malformed(whole.start(), "begin marker without a matching end"))?;
        let close_whole = close.get(0).expect("group 0");
        if &close[2] != "ends" {
            return Err(malformed(close_whole.start(), "nested begin marker"));
        }
        if close[1].parse::<usize>().expect("digit") != model_index {
            return Err(malformed(
                close_whole.start(),
                "end marker names a different model",
            ));
        }
        let text_start = whole.end() + 1;
        if close_whole.start() < text_start + 1
            || &body[whole.end()..text_start] != " "
            || &body[close_whole.start() - 1..close_whole.start()] != " "
        {
            return Err(malformed(
                whole.end(),
                "segment text must be space-delimited",
            ));
        }
        let text = &body[text_start..close_whole.start() - 1];
        segments.push(Segment::new(model_index, text, 0));

        cursor = close_whole.end();
        if cursor < body.len() {
            if &body[cursor..cursor + 1] != " " {
                return Err(malformed(cursor, "expected a single space after a segment"));
            }
            cursor += 1;
        }
    }
    if cursor != body.len() {
        return Err(malformed(cursor, "trailing text after the last segment"));
    }
    Ok((instruction, Trace::from_segments(segments)))
}

/// Reattaches per-segment token counts stored next to a rendered prompt.
pub fn restore_token_counts(trace: &Trace, counts: &[usize]) -> Result<Trace, CodecError> {
    if counts.len() != trace.len() {
        return Err(CodecError::CountMismatch {
            counts: counts.len(),
            segments: trace.len(),
        });
    }
    Ok(Trace::from_segments(
        trace
            .segments()
            .iter()
            .zip(counts)
            .map(|(s, &c)| Segment::new(s.model_index, s.text.clone(), c))
            .collect(),
    ))
}

/// Instruction followed by the raw segment texts, with no markers. This is
/// what candidate generators see.
pub fn plain_concat(query: &Query, trace: &Trace) -> String {
    let mut out = String::with_capacity(
        query.instruction.len() + trace.segments().iter().map(|s| s.text.len()).sum::<usize>(),
    );
    out.push_str(&query.instruction);
    for seg in trace.segments() {
        out.push_str(&seg.text);
    }
    out
}
