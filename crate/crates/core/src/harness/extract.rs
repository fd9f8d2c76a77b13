/// A completion split into fenced code and the surrounding prose.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Extracted {
    pub code: String,
    pub prose: String,
    /// Whether any ``` fence was found. Without one the whole text is code.
    pub fenced: bool,
}

/// Joins the bodies of all ``` blocks. An unclosed fence runs to the end,
/// which is what a truncated generation looks like.
pub fn extract_code(completion: &str) -> Extracted {
    let mut out = Extracted::default();
    let mut inside = false;
    for line in completion.split_inclusive('\n') {
        if line.trim_start().starts_with("```") {
            out.fenced = true;
            inside = !inside;
            continue;
        }
        if inside {
            out.code.push_str(line);
        } else {
            out.prose.push_str(line);
        }
    }
    if !out.fenced {
        out.code = std::mem::take(&mut out.prose);
    }
    out
}
