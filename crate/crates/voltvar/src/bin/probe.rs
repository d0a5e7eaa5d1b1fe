use voltvar::feeder::profiles::{synthesize, ProfileKind};
use voltvar::sim::{run_case, CaseId, Scenario};

fn main() {
    let tmp = std::env::temp_dir().join("voltvar_seed_scan");
    std::fs::create_dir_all(&tmp).unwrap();
    for seed in [20240601u64, 7, 11, 23, 31, 42, 57, 101, 137, 251] {
        let mut ok = true;
        let mut notes = Vec::new();
        for kind in [ProfileKind::HighCloudy, ProfileKind::LightCloudy] {
            let p = synthesize(kind, 15.0, seed);
            let path = tmp.join(format!("{}_{}.csv", kind.name(), seed));
            std::fs::write(&path, p.to_csv()).unwrap();
            let base = Scenario::load(format!(
                "crates/voltvar/data/scenarios/{}.json",
                kind.name()
            ))
            .unwrap();
            let mut r = Vec::new();
            for case in CaseId::ALL {
                let mut sc = base.clone();
                sc.case = case;
                sc.profiles = path.to_string_lossy().into_owned();
                r.push(run_case(&sc).unwrap());
            }
            let (c1, c2, c3) = (&r[0], &r[1], &r[2]);
            if c3.n_ov + c3.n_uv != 0 {
                ok = false;
                notes.push(format!("{}: case3 {}/{}", kind.name(), c3.n_ov, c3.n_uv));
            }
            match kind {
                ProfileKind::HighCloudy => {
                    if !(c3.n_total() < c2.n_total() && c2.n_total() < c1.n_total()) {
                        ok = false;
                        notes.push(format!("hc ops {}/{}/{}", c3.n_total(), c2.n_total(), c1.n_total()));
                    }
                    if !(c3.loss_kwh < c1.loss_kwh && c1.loss_kwh < c2.loss_kwh) {
                        ok = false;
                        notes.push(format!("hc loss {:.0}/{:.0}/{:.0}", c3.loss_kwh, c1.loss_kwh, c2.loss_kwh));
                    }
                }
                _ => {
                    if !(c1.loss_kwh < c3.loss_kwh && c3.loss_kwh < c2.loss_kwh) {
                        ok = false;
                        notes.push(format!("lc loss {:.0}/{:.0}/{:.0}", c1.loss_kwh, c3.loss_kwh, c2.loss_kwh));
                    }
                }
            }
        }
        println!("seed {seed}: {}  {}", if ok { "OK " } else { "BAD" }, notes.join("; "));
    }
}
