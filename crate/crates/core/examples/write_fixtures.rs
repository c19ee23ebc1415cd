//! Regenerates the bundled fixtures: `cargo run -p cestrade-core --example write_fixtures`.

fn main() -> std::io::Result<()> {
    cestrade_core::synthetic::write_bundled_fixtures(cestrade_core::synthetic::fixtures_dir())
}
