use std::path::{Path, PathBuf};

use morphavatar_core::morphable::{generate_toy_head, ToyHeadConfig};
use morphavatar_core::nets::FieldNetworks;
use morphavatar_core::train::{Adam, Checkpoint, TrainConfig};

/// Untrained small checkpoint and its template under `dir`.
pub fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let tpl = generate_toy_head(&ToyHeadConfig::default()).unwrap();
    let mut config = TrainConfig::compact();
    config.fields.geometry_width = 24;
    config.fields.geometry_depth = 3;
    config.fields.deformation_width = 16;
    config.fields.texture_width = 16;
    config.march.n_samples = 16;
    let nets = FieldNetworks::new(config.fields.clone(), 2).unwrap();
    let adam = Adam::new(config.optimizer, nets.num_params());
    let ck = Checkpoint {
        config,
        nets,
        adam,
        epoch: 0,
        template_hash: tpl.content_hash().unwrap(),
    };
    let ck_path = dir.join("checkpoint.bin");
    let tpl_path = dir.join("template.bin");
    ck.save(&ck_path).unwrap();
    tpl.save(&tpl_path).unwrap();
    (ck_path, tpl_path)
}
