use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use sdgj::bsde::{solve_bsde, Engine};
use sdgj::export::{read_dump, write_dump, Dump, DumpKind};
use sdgj::forward::ConstantPolicy;
use sdgj::game::solve_value;
use sdgj::grid::{FnField, StateGrid};
use sdgj::levy_paths::TimeGrid;
use sdgj::oracle::Which;
use sdgj::problem::scenario;

fn round_trip(dump: &Dump) -> Dump {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("field.bin");
    let mut w = BufWriter::new(File::create(&path).unwrap());
    write_dump(dump, &mut w).unwrap();
    w.flush().unwrap();
    drop(w);
    read_dump(BufReader::new(File::open(&path).unwrap())).unwrap()
}

#[test]
fn solver_fields_survive_a_file_round_trip() {
    let spec = scenario("jump_heavy").unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let sgrid = StateGrid::cube(1, 3.0, 13).unwrap();
    let engine = Engine::grid(5);

    let field = solve_value(&spec, Which::Upper, &grid, &sgrid, &engine).unwrap();
    let dump = Dump::from(&field);
    let back = round_trip(&dump);
    assert_eq!(back, dump);
    assert_eq!(back.kind, DumpKind::Value);
    let values = back.field("values").unwrap();
    assert_eq!(values.shape, [17, 13]);
    assert_eq!(values.data[..13], field.values[0][..]);
    assert_eq!(back.field("argmin_v").unwrap().data[0], field.argmin_v[0][0] as f64);

    let phi = FnField(|x: &[f64]| spec.terminal(x));
    let sol = solve_bsde(&spec, &grid, &sgrid, &ConstantPolicy(0), &ConstantPolicy(1), &phi, &engine).unwrap();
    let dump = Dump::from(&sol);
    assert_eq!(round_trip(&dump), dump);
    let names: Vec<&str> = dump.fields.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, ["y", "z", "k_bar", "k"]);
}

#[test]
fn truncated_dumps_are_errors() {
    let spec = scenario("zero_dynamics").unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
    let sgrid = StateGrid::cube(1, 1.0, 3).unwrap();
    let field = solve_value(&spec, Which::Lower, &grid, &sgrid, &Engine::grid(3)).unwrap();
    let mut buf = Vec::new();
    write_dump(&Dump::from(&field), &mut buf).unwrap();
    buf.truncate(buf.len() - 4);
    assert!(read_dump(buf.as_slice()).is_err());
}
