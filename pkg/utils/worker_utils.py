import traceback
from threading import Thread

from tqdm import tqdm


class TaskThread(Thread):
    def __init__(self, fn, item):
        super(TaskThread, self).__init__()
        self.fn = fn
        self.item = item
        self.result = None
        self.error = None

    def run(self):
        # Failures stay with the task; the batch keeps going
        try:
            self.result = self.fn(self.item)
        except Exception as e:
            self.error = e
            self.traceback = traceback.format_exc()


def multi_run(fn, items):
    threads = [TaskThread(fn, item) for item in items]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    return [(x.item, x.result, x.error) for x in threads]


def multi_run_batch(fn, items, batch_size, desc='Running tasks'):
    # Results come back in input order, whatever order the threads finish in
    items = list(items)
    batch_size = max(1, int(batch_size))
    num_batches = (len(items) + batch_size - 1) // batch_size
    results = []
    for i in tqdm(range(num_batches), desc=desc, unit=' batch'):
        results += multi_run(fn, items[i*batch_size : (i+1)*batch_size])
    return results
