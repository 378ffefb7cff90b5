# coding=utf-8

import logging

from viact.mae import DecoderConfig
from viact.model import ModelConfig, ViACT
from viact.storage import Checkpoint, read_dataset, write_checkpoint
from viact.training import Schedule, pretrain

if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO)

    cohort = read_dataset('../01_generate_phantoms/phantoms')
    model = ViACT(ModelConfig.preset('desk'), seed=0)

    schedule = Schedule(base_lr=0.064, batch_size=4, warmup_epochs=2, total_epochs=10)
    trainer = pretrain(cohort, model, schedule, DecoderConfig.preset('desk'), seed=0, mask_ratio=0.9)

    for record in trainer.report.records:
        print('epoch {epoch:2d}  loss {loss:.5f}  val {val_loss:.5f}'.format(**record))

    write_checkpoint('pretrained.ckpt', Checkpoint.from_trainer(trainer))
