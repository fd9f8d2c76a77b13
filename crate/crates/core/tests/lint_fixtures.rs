use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use sinklab::rtllint::{count_by_rule, lint_sources, LintFinding, Rule};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn load(rel: &str) -> (String, String) {
    let p = fixtures().join(rel);
    let src = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    (rel.to_string(), src)
}

fn lint(rel: &str) -> Vec<LintFinding> {
    lint_sources(&[load(rel)])
}

fn only_rule(f: &[LintFinding]) -> BTreeSet<Rule> {
    f.iter().map(|f| f.rule).collect()
}

#[test]
fn listing1_copied_blocks() {
    let f = lint("listings/listing1_redundant_copies.v");
    assert_eq!(only_rule(&f), BTreeSet::from([Rule::RedundantDecl]));
    assert_eq!(f.len(), 2);
    assert!(f[0].message.contains("bfloat16_div"));
    assert!(f[1].message.contains("processing_element"));
    assert!(f.iter().all(|f| f.evidence.iter().any(|e| e.contains("a_sign"))));
}

#[test]
fn listing2_suffix_chain() {
    let f = lint("listings/listing2_hallucinated_variables.v");
    assert_eq!(only_rule(&f), BTreeSet::from([Rule::SuffixChain]));
    let a = f
        .iter()
        .find(|f| f.evidence[0] == "a_mantissa")
        .expect("a_mantissa family");
    assert_eq!(
        a.evidence.last().unwrap(),
        "a_mantissa_shifted_sub_normalized_result_final"
    );
    // the b_ family mirrors it line for line
    assert_eq!(f.len(), 2);
}

#[test]
fn listing3_repetition() {
    let f = lint("listings/listing3_hallucinated_spec.txt");
    assert_eq!(only_rule(&f), BTreeSet::from([Rule::Repetition]));
    assert_eq!(f.len(), 1);
    assert!(f[0].evidence.iter().all(|l| l.contains("also manages")));
}

#[test]
fn listing4_every_dashed_line() {
    let (name, src) = load("listings/listing4_corrupt_output.v");
    let f = lint_sources(&[(name, src.clone())]);
    assert_eq!(only_rule(&f), BTreeSet::from([Rule::CorruptOutput]));
    let flagged: BTreeSet<usize> = f.iter().map(|f| f.span.line).collect();
    let dashed: BTreeSet<usize> = src
        .lines()
        .enumerate()
        .filter(|(_, l)| l.contains("---"))
        .map(|(i, _)| i + 1)
        .collect();
    assert!(!dashed.is_empty());
    assert_eq!(flagged, dashed);
}

#[test]
fn listing5_range_and_width() {
    let f = lint("listings/listing5_size_mismatch.v");
    assert_eq!(only_rule(&f), BTreeSet::from([Rule::RangeViolation]));
    assert_eq!(f.len(), 2);
    assert!(f.iter().any(|f| f.message.contains("outside the declared range [31:0]")));
    assert!(f.iter().any(|f| f.message.contains("102-bit") && f.message.contains("2-bit")));
}

#[test]
fn listing6_unused_ports() {
    let f = lint("listings/listing6_extra_ports.v");
    assert_eq!(only_rule(&f), BTreeSet::from([Rule::UnusedPort]));
    let names: Vec<&str> = f.iter().map(|f| f.evidence[0].as_str()).collect();
    assert_eq!(
        names,
        [
            "vector_wr_addr",
            "vector_wr_en",
            "vector_wr_data",
            "scalar_wr_addr",
            "scalar_wr_en",
            "scalar_wr_data",
            "vector_rd_addr",
            "vector_rd_elem_addr",
        ]
    );
}

#[test]
fn one_extra_port() {
    let src = "module pe (input logic clk, input logic [1:0] vector_wr_addr, input logic [15:0] a,\n\
               output logic [15:0] y);\n  always_ff @(posedge clk) y <= a;\nendmodule\n";
    let f = lint_sources(&[("pe.v".into(), src.into())]);
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].evidence, ["vector_wr_addr"]);
}

#[test]
fn seeded_fixtures() {
    let cases = [
        ("seeded/unused_carry.v", Rule::RedundantDecl, 1),
        ("seeded/five_unused_ports.v", Rule::UnusedPort, 5),
        ("seeded/stray_at.v", Rule::CorruptOutput, 1),
        ("seeded/generation_loop.txt", Rule::Repetition, 1),
    ];
    for (file, rule, n) in cases {
        let f = lint(file);
        let c = count_by_rule(&f);
        assert_eq!(c[&rule], n, "{file}: {f:#?}");
        assert_eq!(f.len(), n, "{file}: {f:#?}");
    }
    assert_eq!(lint("seeded/stray_at.v")[0].span.len, 3);
    assert_eq!(lint("seeded/unused_carry.v")[0].evidence, ["carry"]);
    let lp = lint("seeded/generation_loop.txt");
    assert_eq!(lp[0].evidence.len(), 20);
    assert!(lint("seeded/chain_of_three.v").is_empty());
}

#[test]
fn clean_set_is_silent() {
    let dir = fixtures().join("clean");
    let mut files: Vec<(String, String)> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "v"))
        .map(|p| {
            let name = format!("clean/{}", p.file_name().unwrap().to_string_lossy());
            (name, std::fs::read_to_string(&p).unwrap())
        })
        .collect();
    files.sort();
    assert!(files.len() >= 5);
    let f = lint_sources(&files);
    assert!(f.is_empty(), "{:#?}", f);
}

#[test]
fn ordering_is_stable() {
    let files = vec![
        load("listings/listing6_extra_ports.v"),
        load("listings/listing4_corrupt_output.v"),
        load("seeded/unused_carry.v"),
    ];
    let a = lint_sources(&files);
    let b = lint_sources(&files);
    assert_eq!(a, b);
    for w in a.windows(2) {
        if w[0].file == w[1].file {
            assert!(w[0].span.offset <= w[1].span.offset);
        }
    }
    for f in &a {
        let src = &files.iter().find(|(n, _)| *n == f.file).unwrap().1;
        assert!(f.span.end() <= src.len());
    }
}
