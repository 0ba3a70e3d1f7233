#![no_main]
use libfuzzer_sys::fuzz_target;
use nstasr::data::{parse_jsonl, TranscriptRecord, UtteranceRecord};
use nstasr::nst::{GenerationManifest, WeightRecord};
use nstasr::transducer::DecodeRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_jsonl::<UtteranceRecord>(text, "manifest");
    let _ = parse_jsonl::<DecodeRecord>(text, "pseudo-label file");
    let _ = parse_jsonl::<WeightRecord>(text, "weights file");
    let _ = parse_jsonl::<GenerationManifest>(text, "generation manifest");
    if let Ok(rows) = parse_jsonl::<TranscriptRecord>(text, "transcripts") {
        let out: String = rows
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        assert_eq!(
            parse_jsonl::<TranscriptRecord>(&out, "transcripts").unwrap(),
            rows
        );
        let _ = nstasr::data::manifest_wer(&rows, &rows);
    }
});
