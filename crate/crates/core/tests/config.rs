use pipemorph::config::{read_toml, write_toml, ModelSpec, RunConfig};
use pipemorph::Error;

#[test]
fn block_models_round_trip_in_block_form() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "hardware_preset = \"commodity\"\n[model]\nname = \"t\"\nblock = { params = 5, activation_bytes = 7, repeat = 3 }\n",
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.model().unwrap().cutpoints.len(), 3);
    let out = dir.path().join("out.toml");
    write_toml(&out, &cfg).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("[model.block]") && !text.contains("cutpoints"), "{text}");
    assert_eq!(RunConfig::load(&out).unwrap().model().unwrap(), cfg.model().unwrap());
}

#[test]
fn edited_block_models_are_written_as_cutpoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.toml");
    std::fs::write(&path, "name = \"t\"\nblock = { params = 5, activation_bytes = 7, repeat = 3 }\n").unwrap();
    let mut m: ModelSpec = read_toml(&path).unwrap();
    m.cutpoints[1].params = 9;
    write_toml(&path, &m).unwrap();
    let back: ModelSpec = read_toml(&path).unwrap();
    assert_eq!(back.cutpoints, m.cutpoints);
    assert!(back.block.is_none());
}

#[test]
fn unknown_fields_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[planner]\nimprovment_threshold = 0.1\n").unwrap();
    match RunConfig::load(&path) {
        Err(Error::Parse { field, message, .. }) => {
            assert_eq!(field, "planner.improvment_threshold");
            assert!(message.contains("unknown field"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}
