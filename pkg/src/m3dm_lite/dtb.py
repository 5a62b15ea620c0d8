"""
Score registry: sqlite database holding the scene scores and segmentation maps produced by inference.
"""
import io
import os
import sqlite3

import numpy as np

from m3dm_lite.errors import DataError

SCENE_COLUMNS = ('id', 'label', 'kind', 'score')
SCENE_TYPES = ('TEXT', 'INT', 'TEXT', 'REAL')
MAP_COLUMNS = ('id', 'seg_map', 'patch_map')
MAP_TYPES = ('TEXT', 'ARRAY', 'ARRAY')


def adapt_array(arr):
    out = io.BytesIO()
    np.save(out, arr)
    out.seek(0)
    return sqlite3.Binary(out.read())


def convert_array(text):
    out = io.BytesIO(text)
    out.seek(0)
    return np.load(out)


sqlite3.register_adapter(np.ndarray, adapt_array)
sqlite3.register_converter("ARRAY", convert_array)


def connect(db_name):
    return sqlite3.connect(db_name, detect_types=sqlite3.PARSE_DECLTYPES)


def create_scores_db(db_name):
    """
    Creates registry tables `scenes` (scene level scores) and `maps` (segmentation maps) if they do not exist.

    :param db_name: str; path to db location
    :return: None
    """
    conn = connect(db_name)
    cursor = conn.cursor()
    db_args = (conn, cursor)

    create_table('scenes', SCENE_COLUMNS, SCENE_TYPES, *db_args, **dict(additive='PRIMARY KEY (id)'))
    foreign_key = 'PRIMARY KEY (id), FOREIGN KEY (id) REFERENCES scenes (id)'
    create_table('maps', MAP_COLUMNS, MAP_TYPES, *db_args, **dict(additive=foreign_key))

    conn.close()


def create_table(name, columns, types, *args, **kwargs):
    """
    Creates a new table if already does not exist.

    :param name: str; name of the table
    :param columns: tuple; name of columns
    :param types: tuple; types of columns
    :param args: tuple; (database connection, cursor)
    :param additive: str; additional string used to define primary or foreign key columns
    :return: None
    """
    conn, cursor = args

    parameters = ','.join([f" {col} {tp}" for col, tp in zip(columns, types)])
    additive = kwargs.get('additive')
    parameters = ', '.join([parameters, additive]) if additive is not None else parameters
    cursor.execute(f"CREATE TABLE IF NOT EXISTS {name} ({parameters})")

    conn.commit()


def insert_to_table(table, columns, values, *args):
    """
    Insert line to table defined by `columns` and `values`.

    :param table: str; name of the table
    :param columns: tuple; name of the columns
    :param values: tuple; values added to the table corresponding to `columns`
    :param args: tuple; (database connection, cursor)
    :return: None
    """
    conn, cursor = args

    val_holders = ', '.join(["?" for _ in values])
    cursor.execute(f"INSERT INTO {table} ({', '.join(columns)}) VALUES ({val_holders})", values)

    conn.commit()


def insert_scene_scores(db_name, scene_id, label, kind, score, seg_map, patch_map):
    """
    Stores the inference result of one scene.

    :param db_name: str;
    :param scene_id: str;
    :param label: int; ground truth label from the manifest, -1 if unknown
    :param kind: str; anomaly kind from the manifest
    :param score: float; scene anomaly score
    :param seg_map: numpy.array; (H, W) float32 segmentation map
    :param patch_map: numpy.array; (Gh, Gw) float32 patch map before upsampling
    :return: None
    """
    conn = connect(db_name)
    cursor = conn.cursor()
    db_args = (conn, cursor)

    insert_to_table('scenes', SCENE_COLUMNS, (scene_id, int(label), kind, float(score)), *db_args)
    insert_to_table('maps', MAP_COLUMNS, (scene_id, np.asarray(seg_map, dtype=np.float32),
                                          np.asarray(patch_map, dtype=np.float32)), *db_args)

    conn.close()


def search_for_breakpoint(db_name, ids):
    """
    Function will retrieve IDs of already scored scenes to continue interrupted inference.

    :param db_name: str;
    :param ids: list; scene ids scheduled in this run
    :return: list; ids from `ids` that still have to be scored, in their original order
    """
    if not os.path.isfile(db_name):
        return list(ids)
    conn = connect(db_name)
    conn.row_factory = lambda cursor, row: row[0]
    cursor = conn.cursor()
    done = set(cursor.execute("SELECT id FROM scenes").fetchall())
    conn.close()

    unknown = done.difference(ids)
    if len(unknown) > 0:
        raise DataError(f'Registry {db_name} holds scenes {sorted(unknown)} which are not part of this run, '
                        f'breakpoint cannot be determined.')
    return [iden for iden in ids if iden not in done]


def get_scores(db_name):
    """
    Returns all scene records ordered by id.

    :param db_name: str;
    :return: List[dict]; keys `id`, `label`, `kind`, `score`, `seg_map`, `patch_map`
    """
    if not os.path.isfile(db_name):
        raise DataError(f'Score registry {db_name} does not exist.')
    conn = connect(db_name)
    cursor = conn.cursor()
    sql = "SELECT s.id, s.label, s.kind, s.score, m.seg_map, m.patch_map FROM scenes s JOIN maps m ON s.id = m.id " \
          "ORDER BY s.id"
    columns = SCENE_COLUMNS + MAP_COLUMNS[1:]
    result = [dict(zip(columns, row)) for row in cursor.execute(sql)]
    conn.close()
    return result
