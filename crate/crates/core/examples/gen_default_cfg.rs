//! Regenerates configs/default.cfg from the built-in architecture.

fn main() {
    print!(
        "{}",
        temviro_core::model::ArchConfig::default_fused().to_toml()
    );
}
