//! Praat TextGrid reader (long and short text formats).
//!
//! Both formats carry the same sequence of values; the long format merely
//! decorates them with `key =` labels and `[n]:` item headers. The lexer
//! therefore keeps only quoted strings, numbers and `<flag>` words, which
//! turns either format into one flat value stream.

use super::{check_word_order, AlignmentError, WordAlignment};

const WORDS_TIER: &str = "words";
const SILENCE_LABELS: [&str; 2] = ["sil", "sp"];
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Num(f64),
    Flag(String),
}

#[derive(Debug, Clone)]
struct Lexeme {
    value: Value,
    line: usize,
}

fn err(line: usize, message: impl Into<String>) -> AlignmentError {
    AlignmentError::TextGrid { line, message: message.into() }
}

fn lex(content: &str) -> Result<Vec<Lexeme>, AlignmentError> {
    let mut out = Vec::new();
    let mut chars = content.chars().peekable();
    let mut line = 1usize;
    while let Some(&c) = chars.peek() {
        match c {
            '\n' => {
                line += 1;
                chars.next();
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            '!' => {
                // short-format comment
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                }
            }
            '"' => {
                let start_line = line;
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        Some('"') => {
                            if chars.peek() == Some(&'"') {
                                chars.next();
                                s.push('"');
                            } else {
                                break;
                            }
                        }
                        Some(c) => {
                            if c == '\n' {
                                line += 1;
                            }
                            s.push(c);
                        }
                        None => return Err(err(start_line, "unterminated string")),
                    }
                }
                out.push(Lexeme { value: Value::Str(s), line: start_line });
            }
            _ => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() || c == '"' {
                        break;
                    }
                    word.push(c);
                    chars.next();
                }
                if word.starts_with('<') && word.ends_with('>') {
                    out.push(Lexeme { value: Value::Flag(word), line });
                } else if let Ok(x) = word.parse::<f64>() {
                    out.push(Lexeme { value: Value::Num(x), line });
                } else if looks_numeric(&word) {
                    return Err(err(line, format!("malformed number {word:?}")));
                }
                // anything else is a label such as `xmin`, `=`, `item [1]:`
            }
        }
    }
    Ok(out)
}

/// Words that start like a number but fail to parse are data errors, not
/// labels.
fn looks_numeric(word: &str) -> bool {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) if c.is_ascii_digit() => true,
        Some('-') | Some('+') | Some('.') => chars.next().is_some_and(|c| c.is_ascii_digit()),
        _ => false,
    }
}

struct Stream {
    items: Vec<Lexeme>,
    pos: usize,
}

impl Stream {
    fn last_line(&self) -> usize {
        self.items.last().map_or(1, |l| l.line)
    }

    fn next(&mut self, what: &str) -> Result<Lexeme, AlignmentError> {
        let item = self
            .items
            .get(self.pos)
            .cloned()
            .ok_or_else(|| err(self.last_line(), format!("unexpected end of file, expected {what}")))?;
        self.pos += 1;
        Ok(item)
    }

    fn string(&mut self, what: &str) -> Result<(String, usize), AlignmentError> {
        let lx = self.next(what)?;
        match lx.value {
            Value::Str(s) => Ok((s, lx.line)),
            other => Err(err(lx.line, format!("expected {what} string, found {other:?}"))),
        }
    }

    fn number(&mut self, what: &str) -> Result<(f64, usize), AlignmentError> {
        let lx = self.next(what)?;
        match lx.value {
            Value::Num(x) if x.is_finite() => Ok((x, lx.line)),
            other => Err(err(lx.line, format!("expected numeric {what}, found {other:?}"))),
        }
    }

    fn count(&mut self, what: &str) -> Result<usize, AlignmentError> {
        let (x, line) = self.number(what)?;
        if x < 0.0 || x.fract() != 0.0 {
            return Err(err(line, format!("{what} must be a non-negative integer, got {x}")));
        }
        Ok(x as usize)
    }
}

struct RawInterval {
    start: f64,
    end: f64,
    label: String,
    line: usize,
}

/// Parses a TextGrid and returns the non-silent intervals of its `words`
/// interval tier.
pub fn parse_textgrid(content: &[u8]) -> Result<Vec<WordAlignment>, AlignmentError> {
    let text = std::str::from_utf8(content).map_err(|e| err(1, format!("not UTF-8: {e}")))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut s = Stream { items: lex(text)?, pos: 0 };

    let (file_type, line) = s.string("file type")?;
    if file_type != "ooTextFile" {
        return Err(err(line, format!("unsupported file type {file_type:?}")));
    }
    let (class, line) = s.string("object class")?;
    if class != "TextGrid" {
        return Err(err(line, format!("object class {class:?} is not TextGrid")));
    }
    s.number("xmin")?;
    s.number("xmax")?;
    let lx = s.next("tiers flag")?;
    match &lx.value {
        Value::Flag(f) if f == "<exists>" => {}
        Value::Flag(f) if f == "<absent>" => return Err(AlignmentError::MissingTier(WORDS_TIER.into())),
        other => return Err(err(lx.line, format!("expected <exists>, found {other:?}"))),
    }
    let n_tiers = s.count("tier count")?;

    let mut found: Option<Vec<RawInterval>> = None;
    for _ in 0..n_tiers {
        let (class, class_line) = s.string("tier class")?;
        let (name, _) = s.string("tier name")?;
        s.number("tier xmin")?;
        s.number("tier xmax")?;
        let n = s.count("interval count")?;
        match class.as_str() {
            "IntervalTier" => {
                let mut intervals = Vec::with_capacity(n);
                for _ in 0..n {
                    let (start, line) = s.number("interval xmin")?;
                    let (end, _) = s.number("interval xmax")?;
                    let (label, _) = s.string("interval text")?;
                    intervals.push(RawInterval { start, end, label, line });
                }
                if name == WORDS_TIER && found.is_none() {
                    found = Some(intervals);
                }
            }
            "TextTier" => {
                for _ in 0..n {
                    s.number("point time")?;
                    s.string("point mark")?;
                }
            }
            other => return Err(err(class_line, format!("unknown tier class {other:?}"))),
        }
    }

    let intervals = found.ok_or_else(|| AlignmentError::MissingTier(WORDS_TIER.into()))?;
    let mut prev_end = f64::NEG_INFINITY;
    let mut words = Vec::new();
    for iv in intervals {
        if iv.end < iv.start {
            return Err(err(iv.line, format!("interval end {} precedes start {}", iv.end, iv.start)));
        }
        if iv.start + TIME_EPS < prev_end {
            return Err(err(
                iv.line,
                format!("interval starting at {} overlaps or precedes the previous one (ends {})", iv.start, prev_end),
            ));
        }
        prev_end = iv.end;
        let label = iv.label.trim();
        if label.is_empty() || SILENCE_LABELS.contains(&label) {
            continue;
        }
        if iv.end - iv.start <= 0.0 {
            return Err(err(iv.line, format!("word {label:?} has zero duration")));
        }
        words.push(WordAlignment { word: label.to_string(), start: iv.start, end: iv.end });
    }
    check_word_order(&words)?;
    Ok(words)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LONG: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 1.0
tiers? <exists>
size = 2
item []:
    item [1]:
        class = "IntervalTier"
        name = "words"
        xmin = 0
        xmax = 1.0
        intervals: size = 4
        intervals [1]:
            xmin = 0
            xmax = 0.12
            text = ""
        intervals [2]:
            xmin = 0.12
            xmax = 0.5
            text = "hi"
        intervals [3]:
            xmin = 0.5
            xmax = 0.6
            text = "sp"
        intervals [4]:
            xmin = 0.6
            xmax = 1.0
            text = "there"
    item [2]:
        class = "IntervalTier"
        name = "phones"
        xmin = 0
        xmax = 1.0
        intervals: size = 1
        intervals [1]:
            xmin = 0
            xmax = 1.0
            text = "HH"
"#;

    const SHORT: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

0
1.0
<exists>
2
"TextTier"
"events"
0
1.0
1
0.3
"click"
"IntervalTier"
"words"
0
1.0
3
0
0.12
""
0.12
0.5
"hi"
0.5
1.0
"sil"
"#;

    #[test]
    fn long_format_drops_silence() {
        let w = parse_textgrid(LONG.as_bytes()).unwrap();
        assert_eq!(
            w,
            vec![
                WordAlignment { word: "hi".into(), start: 0.12, end: 0.5 },
                WordAlignment { word: "there".into(), start: 0.6, end: 1.0 },
            ]
        );
    }

    #[test]
    fn short_format_with_point_tier() {
        let w = parse_textgrid(SHORT.as_bytes()).unwrap();
        assert_eq!(w, vec![WordAlignment { word: "hi".into(), start: 0.12, end: 0.5 }]);
    }

    #[test]
    fn empty_words_tier_is_valid() {
        let src = "File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n0\n1\n<exists>\n1\n\"IntervalTier\"\n\"words\"\n0\n1\n0\n";
        assert!(parse_textgrid(src.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn missing_tier() {
        let src = LONG.replace("\"words\"", "\"wrds\"");
        assert!(matches!(parse_textgrid(src.as_bytes()), Err(AlignmentError::MissingTier(_))));
    }

    #[test]
    fn out_of_order_intervals() {
        let src = LONG.replace("xmin = 0.6\n", "xmin = 0.2\n");
        match parse_textgrid(src.as_bytes()) {
            Err(AlignmentError::TextGrid { line, .. }) => assert_eq!(line, 28),
            other => panic!("expected positional error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_number_reports_line() {
        let src = LONG.replace("xmax = 0.12", "xmax = 0.1x2");
        match parse_textgrid(src.as_bytes()) {
            Err(AlignmentError::TextGrid { line, message }) => {
                assert_eq!(line, 17);
                assert!(message.contains("0.1x2"));
            }
            other => panic!("expected positional error, got {other:?}"),
        }
    }

    #[test]
    fn escaped_quotes_in_labels() {
        let src = SHORT.replace("\"hi\"", "\"say \"\"hi\"\"\"");
        let w = parse_textgrid(src.as_bytes()).unwrap();
        assert_eq!(w[0].word, "say \"hi\"");
    }

    #[test]
    fn truncated_file() {
        let cut = &LONG[..LONG.len() / 2];
        assert!(matches!(parse_textgrid(cut.as_bytes()), Err(AlignmentError::TextGrid { .. })));
    }
}
