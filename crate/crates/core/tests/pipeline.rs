use tagrace_core::corpus::{run_case, Corpus};
use tagrace_core::oracle::{exact_race_check, racy_granules};
use tagrace_core::program::{enumerate_interleavings, parse_program, random_schedule, validate_trace, Trace};
use tagrace_core::tbri::{run_detector, ReportKind};

#[test]
fn every_data_race_lands_on_an_oracle_racy_granule() {
    for case in Corpus::builtin().cases() {
        let p = case.program().unwrap();
        let racy = racy_granules(&p).unwrap();
        for t in enumerate_interleavings(&p, 10_000).unwrap() {
            for r in run_detector(&t, &p).unwrap() {
                if r.kind == ReportKind::DataRace {
                    assert!(racy.contains(&r.granule(&p).unwrap()), "{}: {r:?}", case.name);
                }
            }
        }
    }
}

#[test]
fn traces_survive_json() {
    for case in Corpus::builtin().cases() {
        let p = case.program().unwrap();
        let t = random_schedule(&p, 99).unwrap();
        let back = Trace::from_json(&t.to_json(&p), &p).unwrap();
        assert_eq!(back, t);
        validate_trace(&p, &back).unwrap();
        assert_eq!(run_detector(&back, &p).unwrap(), run_detector(&t, &p).unwrap());
    }
}

#[test]
fn racy_case_has_an_unordered_pair_in_every_interleaving() {
    let p = parse_program("pointee A size 16\nthread a { write A }\nthread b { read A }\n").unwrap();
    let traces: Vec<_> = enumerate_interleavings(&p, 100).unwrap().collect();
    assert_eq!(traces.len(), 2);
    for t in &traces {
        assert_eq!(exact_race_check(t).unwrap().len(), 1);
    }
}

#[test]
fn corpus_outcomes_match_labels() {
    let corpus = Corpus::builtin();
    for case in corpus.cases() {
        let mut seen = 0;
        let out = run_case(case, 10_000, |i, _| {
            assert_eq!(i, seen);
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, out.traces);
        assert!(out.pass, "{out:?}");
    }
}
