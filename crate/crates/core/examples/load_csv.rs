//! Ingesting demand data in the CSV schema, with optional text files.

use kgcm::data::load_csv;

const DEMAND: &str = "\
region_id,timestamp,demand,avg_passengers,avg_distance
north,2024-10-01T00:00:00Z,12,1.4,3.2
north,2024-10-01T01:00:00Z,15,1.5,3.0
north,2024-10-01T02:00:00Z,31,1.9,2.7
";

const LOCAL: &str = "\
region_id,timestamp,description
north,2024-10-01T01:00:00Z,stadium match near north; expect high extra demand
";

fn main() -> kgcm::Result<()> {
    let dir = std::env::temp_dir().join(format!("kgcm-csv-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create temp dir");
    let (d, l) = (dir.join("demand.csv"), dir.join("local_text.csv"));
    std::fs::write(&d, DEMAND).expect("write");
    std::fs::write(&l, LOCAL).expect("write");

    let ds = load_csv(&d, Some(&l), None)?;
    let r = &ds.regions[0];
    println!("region,{}", r.id);
    for (row, text) in r.rows.iter().zip(&r.local_text) {
        println!("{},{},{:?}", row.timestamp, row.demand, text);
    }

    std::fs::write(&d, DEMAND.replace("01T02", "01T00")).expect("write");
    println!("rejected,{}", load_csv(&d, None, None).unwrap_err());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
