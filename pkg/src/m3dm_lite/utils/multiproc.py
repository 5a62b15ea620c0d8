from multiprocessing import Pool

import numpy as np
from loguru import logger

from .. import config


def multiprocess_eval(items, fn, args, label='Scene', on_chunk=None):
    """
    Function for multiprocess evaluation of per-scene work. Results are returned in the order of `items`, so the
    outcome does not depend on the number of processes.

    :param items: list; scene IDs (or any picklable work items)
    :param fn: callable; fn(item, *args) evaluated for each item, has to be picklable (module level)
    :param args: tuple; additional arguments of `fn`
    :param label: str; name of the work item used in progress messages
    :param on_chunk: callable; on_chunk(chunk_items, chunk_results) called by the coordinator after every chunk
    :return: list; results of `fn` for each item
    """
    items = list(items)
    n_items = len(items)
    chunksize = config.CHUNKSIZE
    n_chunks = int(np.ceil(n_items / chunksize))
    processes = config.NUMBER_OF_PROCESSES or 1

    results = []
    for jj in range(n_chunks):
        chunk_items = items[jj*chunksize: (jj+1)*chunksize]
        logger.debug(f'Chunk {jj+1}/{n_chunks}.')

        if processes == 1:
            chunk_results = [fn(item, *args) for item in chunk_items]
        else:
            with Pool(processes=min(processes, len(chunk_items))) as pool:
                chunk_results = pool.starmap(fn, [(item, ) + tuple(args) for item in chunk_items])

        if on_chunk is not None:
            on_chunk(chunk_items, chunk_results)
        results.extend(chunk_results)

        done = len(results)
        logger.info(f'{label} processed: {done}/{n_items}, {100.0*done/n_items:.2f}%')

    return results
