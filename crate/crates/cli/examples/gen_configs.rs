// one-off generator for the shipped preset files
use seqdiff_cli::config::{preset, preset_names};

fn main() {
    std::fs::create_dir_all("configs").unwrap();
    for name in preset_names() {
        let cfg = preset(&name).unwrap();
        std::fs::write(format!("configs/{name}.toml"), cfg.to_toml()).unwrap();
        println!("configs/{name}.toml");
    }
}
