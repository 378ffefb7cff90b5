# coding=utf-8

import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from viact import numerics as nx
from viact.plugins.base import BasePlugin
from viact.storage import read_checkpoint, read_dataset
from viact.training import Schedule, finetune_classify, first_window


class AccuracyPlugin(BasePlugin):
    NAME = 'Accuracy'

    def after_epoch(self, trainer, epoch, record):
        print('epoch {}: accuracy {:.2f}'.format(epoch, record.get('val_accuracy', float('nan'))))


if __name__ == '__main__':
    logging.basicConfig(level=logging.WARNING)

    cohort = read_dataset('../01_generate_phantoms/phantoms')
    model = read_checkpoint('../02_pretrain/pretrained.ckpt').build_model()

    schedule = Schedule(base_lr=0.064, batch_size=4, warmup_epochs=2, total_epochs=10)
    finetune_classify(cohort, model, schedule, options={'plugins': [AccuracyPlugin()]})

    sample = cohort.split('test')[0]
    clip, points = first_window(sample, model.config.frames)

    with nx.no_grad():
        output = model.forward(clip, points, keep_attention=True)

    for head in range(model.config.heads):
        maps = model.attention_maps(output, block=-1, head=head)

        fig, axes = plt.subplots(1, clip.frame_count, figsize=(2 * clip.frame_count, 2))
        for t, ax in enumerate(axes):
            ax.imshow(clip.frames[t], cmap='gray', vmin=0, vmax=1)
            ax.scatter(points.coords[t, :, 0], points.coords[t, :, 1], c=maps[t], cmap='jet', vmin=0, vmax=1, s=8)
            ax.set_axis_off()

        fig.savefig('attention_head_{}.png'.format(head))
        plt.close(fig)
