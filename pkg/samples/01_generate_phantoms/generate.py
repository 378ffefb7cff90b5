# coding=utf-8

import logging

import numpy as np

from viact.phantom import PhantomSpec, generate_cohort
from viact.storage import write_dataset, read_dataset
from viact.utils import debug

if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO)

    # 22 frames hold an 8 frame window at stride 3
    base = PhantomSpec(height=96, width=96, frames=22, points=21)
    cohort = generate_cohort(20, seed=7, base=base)

    write_dataset('phantoms', cohort, {'force': True})
    cohort = read_dataset('phantoms')

    debug(dict(cohort.splits))

    sample = cohort.samples['sample_000']
    motion = np.linalg.norm(sample.points.coords - sample.points.coords[:1], axis=-1)

    debug(sample.spec.as_dict())
    print('largest displacement {:.2f} px'.format(motion.max()))
