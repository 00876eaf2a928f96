//! Generate the synthetic events, write them as CSV and JSONL, read them
//! back, and compare two of them with the exact EMD.

use neemo::events::{gen_subjet_event, Event, EventFormat, SubjetParams};
use neemo::cli::{generate, Generator};
use neemo::ot::exact_emd;

fn main() -> neemo::Result<()> {
    let dir = std::env::temp_dir().join("neemo-events-example");
    std::fs::create_dir_all(&dir).map_err(|e| neemo::Error::Io { path: dir.clone(), source: e })?;

    let circles = generate(&Generator::three_circles(), 0)?;
    let (jet, centers) = gen_subjet_event(&SubjetParams::default(), 1)?;
    println!("three circles: {} particles; subjets: {} particles around {centers:.3?}", circles.len(), jet.len());

    for (name, format) in [("circles.csv", EventFormat::Csv), ("circles.jsonl", EventFormat::Jsonl)] {
        let path = dir.join(name);
        circles.save(&path, format)?;
        let back = Event::load(&path, format)?;
        println!("{}: round trip exact = {}", path.display(), back == circles);
    }

    let d = exact_emd(&circles.normalize()?, &jet.normalize()?)?.cost;
    println!("EMD(circles, subjets) = {d:.5}");
    Ok(())
}
