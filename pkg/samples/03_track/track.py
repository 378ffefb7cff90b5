# coding=utf-8

import logging

from viact import metrics
from viact.phantom import PhantomSpec, render_sample
from viact.storage import read_checkpoint, read_dataset
from viact.training import Schedule, finetune_track, track_long

if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO)

    cohort = read_dataset('../01_generate_phantoms/phantoms')
    model = read_checkpoint('../02_pretrain/pretrained.ckpt').build_model()

    schedule = Schedule(base_lr=0.064, batch_size=4, warmup_epochs=2, total_epochs=15)
    trainer = finetune_track(cohort, model, schedule, options={'refine_passes': 1})

    values = trainer.evaluate(cohort.split('test'))
    print('test ME {me:.3f} px, identity {me_identity:.3f} px'.format(**values))

    # 29 frames are four 8 frame blocks sharing their first frame
    sample = render_sample(PhantomSpec(height=96, width=96, frames=29, points=21, seed=99))
    tracked = track_long(model, sample.clip, sample.points, refine_passes=1)

    print('long clip ME {:.3f} px'.format(metrics.me(tracked, sample.points)))

    strain = metrics.longitudinal_strain(tracked)
    truth = metrics.longitudinal_strain(sample.points)
    print('peak strain {:.3f} (true {:.3f})'.format(strain.min(), truth.min()))
